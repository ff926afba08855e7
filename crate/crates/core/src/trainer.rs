//! Minibatch training of a generator against the k-NN ECMMD loss.
//!
//! Noise `η_i` is drawn once per training row before the first epoch. Each
//! epoch shuffles the row indices with a seeded permutation and cuts it into
//! consecutive batches of `B`; a trailing batch with fewer than `k_B + 1` rows
//! is dropped. Every batch builds its own `k_B`-NN graph from its predictor
//! rows only, evaluates the batch loss, and takes one AdamW step.
//!
//! AdamW (decoupled weight decay, bias-corrected moments), per parameter entry
//! at step `t >= 1` with gradient `g`:
//!
//! ```text
//! θ ← θ · (1 - α λ)
//! m ← β1 m + (1 - β1) g
//! v ← β2 v + (1 - β2) g²
//! θ ← θ - α · (m / (1 - β1^t)) / (sqrt(v / (1 - β2^t)) + ε)
//! ```

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{loss_and_gradients, BatchView, Tensor};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::generator::{init_generator, sample_noise, GeneratorConfig, GeneratorNet, NoiseSpec};
use crate::kernels::{median_heuristic_bandwidth, KernelConfig, KernelFamily};
use crate::knn::KnnGraph;
use crate::rng::{derive_seed, SeededRng};

const NOISE_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

/// `max(4, ⌈B^{1/3}⌉)`.
pub fn default_k_for_batch(batch_size: usize) -> usize {
    let mut c = 1usize;
    while c * c * c < batch_size {
        c += 1;
    }
    c.max(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    /// Gaussian kernel, bandwidth from the median heuristic on the response
    /// rows of the first batch, frozen for the run.
    MedianAuto,
    Fixed(KernelConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub k_batch: usize,
    pub learning_rate: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub kernel: KernelChoice,
    /// Redraw `η` at the start of every epoch after the first.
    pub resample_noise_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: DEFAULT_BATCH_SIZE,
            k_batch: default_k_for_batch(DEFAULT_BATCH_SIZE),
            learning_rate: DEFAULT_LEARNING_RATE,
            adamw: AdamWConfig::default(),
            seed: 0,
            kernel: KernelChoice::MedianAuto,
            resample_noise_each_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.batch_size < 2 {
            return bad(format!("batch size must be >= 2, got {}", self.batch_size));
        }
        if self.batch_size > n {
            return bad(format!("batch size {} exceeds dataset size {n}", self.batch_size));
        }
        if self.k_batch == 0 || self.k_batch >= self.batch_size {
            return bad(format!(
                "k_batch must satisfy 1 <= k <= B-1 (k = {}, B = {})",
                self.k_batch, self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return bad(format!("invalid AdamW hyperparameters {a:?}"));
        }
        if let KernelChoice::Fixed(k) = self.kernel {
            k.validate()?;
            if k.family != KernelFamily::Gaussian {
                return bad("training requires the gaussian kernel".into());
            }
        }
        Ok(())
    }

    /// Steps actually taken: full batches plus a trailing batch when it has
    /// at least `k_batch + 1` rows.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        let full = n / self.batch_size;
        let rem = n % self.batch_size;
        full + usize::from(rem > self.k_batch)
    }
}

#[derive(Debug, Clone)]
pub struct AdamWState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamWState,
    lr: f64,
    hyper: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::DimensionMismatch(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let decay = 1.0 - lr * hyper.weight_decay;
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        for e in 0..pd.len() {
            let gv = g.data()[e];
            let mv = &mut m.data_mut()[e];
            *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * gv;
            let vv = &mut v.data_mut()[e];
            *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * gv * gv;
            let m_hat = m.data()[e] / bc1;
            let v_hat = v.data()[e] / bc2;
            pd[e] = pd[e] * decay - lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Batch loss on a freshly built `k`-NN graph over the batch predictors, and
/// its parameter gradients.
pub fn batch_loss_and_grads(
    net: &GeneratorNet,
    batch: &BatchView<'_>,
    kernel: &KernelConfig,
    k: usize,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.len() < k + 1 {
        return Err(Error::InvalidParameter(format!(
            "batch of {} rows is too small for k = {k}",
            batch.len()
        )));
    }
    let graph = KnnGraph::build(batch.x, k)?;
    loss_and_gradients(net, batch, kernel, &graph)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<f64>,
    pub wall_ms: f64,
    /// Kernel actually used (resolved from `median-auto` when applicable).
    pub kernel: Option<KernelConfig>,
    pub checkpoint: Option<String>,
}

/// What the step observer sees: the dataset rows in this batch and the graph
/// built for them.
pub struct StepInfo<'a> {
    pub step: usize,
    pub epoch: usize,
    pub batch_indices: &'a [usize],
    pub graph: &'a KnnGraph,
    pub loss: f64,
}

pub fn train(dataset: &Dataset, gen_cfg: &GeneratorConfig, cfg: &TrainConfig) -> Result<(GeneratorNet, TrainReport)> {
    train_with_observer(dataset, gen_cfg, cfg, |_| {})
}

pub fn train_with_observer(
    dataset: &Dataset,
    gen_cfg: &GeneratorConfig,
    cfg: &TrainConfig,
    observe: impl FnMut(&StepInfo<'_>),
) -> Result<(GeneratorNet, TrainReport)> {
    gen_cfg.validate()?;
    train_from(init_generator(gen_cfg)?, dataset, cfg, observe)
}

/// Continues training from an existing network (e.g. a loaded checkpoint).
/// Optimizer moments start from zero.
pub fn train_from(
    mut net: GeneratorNet,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&StepInfo<'_>),
) -> Result<(GeneratorNet, TrainReport)> {
    let gen_cfg = net.config().clone();
    let n = dataset.len();
    if n == 0 {
        return Err(Error::InvalidParameter("training dataset is empty".into()));
    }
    cfg.validate(n)?;
    if gen_cfg.d != dataset.x_dim() || gen_cfg.p != dataset.y_dim() {
        return Err(Error::DimensionMismatch(format!(
            "generator maps d = {} to p = {}, dataset has d = {}, p = {}",
            gen_cfg.d,
            gen_cfg.p,
            dataset.x_dim(),
            dataset.y_dim()
        )));
    }
    let start = Instant::now();
    let mut state = AdamWState::new(&net.parameters());
    let spec = NoiseSpec::new(gen_cfg.m)?;
    let mut eta = sample_noise(&spec, n, derive_seed(cfg.seed, NOISE_STREAM));
    let mut shuffler = SeededRng::new(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut kernel = match cfg.kernel {
        KernelChoice::Fixed(k) => Some(k),
        KernelChoice::MedianAuto => None,
    };

    let mut steps = Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch(n));
    let mut epoch_mean_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if cfg.resample_noise_each_epoch && epoch > 0 {
            eta = sample_noise(&spec, n, derive_seed(cfg.seed, NOISE_STREAM + 1000 * epoch as u64));
        }
        let perm = shuffler.permutation(n);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for idx in perm.chunks(cfg.batch_size) {
            if idx.len() < cfg.k_batch + 1 {
                continue;
            }
            let (bx, by, be) = (dataset.x.select_rows(idx), dataset.y.select_rows(idx), eta.select_rows(idx));
            let kern = match kernel {
                Some(k) => k,
                None => {
                    let k = KernelConfig::gaussian(median_heuristic_bandwidth(&by)?)?;
                    kernel = Some(k);
                    k
                }
            };
            let batch = BatchView::new(&bx, &by, &be)?;
            let graph = KnnGraph::build(&bx, cfg.k_batch)?;
            let (loss, grads) = loss_and_gradients(&net, &batch, &kern, &graph).map_err(|e| Error::Diverged {
                step,
                msg: e.to_string(),
            })?;
            if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    step,
                    msg: format!("non-finite loss or gradient (loss = {loss})"),
                });
            }
            adamw_step(&mut net.parameters_mut(), &grads, &mut state, cfg.learning_rate, &cfg.adamw)?;
            observe(&StepInfo {
                step,
                epoch,
                batch_indices: idx,
                graph: &graph,
                loss,
            });
            steps.push(StepRecord {
                step,
                epoch,
                loss,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            epoch_total += loss;
            epoch_steps += 1;
            step += 1;
        }
        epoch_mean_loss.push(epoch_total / epoch_steps as f64);
    }
    Ok((
        net,
        TrainReport {
            steps,
            epoch_mean_loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            kernel,
            checkpoint: None,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gen_helix;
    use crate::matrix::Matrix;

    #[test]
    fn default_k_rule() {
        assert_eq!(default_k_for_batch(256), 7);
        assert_eq!(default_k_for_batch(8), 4);
        assert_eq!(default_k_for_batch(1000), 10);
        assert_eq!(default_k_for_batch(1001), 11);
    }

    #[test]
    fn adamw_zero_gradient_is_pure_decay() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let orig = p.clone();
        let g = Tensor::zeros(vec![3]);
        let mut state = AdamWState::new(&[&p]);
        let hyper = AdamWConfig::default();
        let lr = 0.1;
        adamw_step(&mut [&mut p], &[g.clone()], &mut state, lr, &hyper).unwrap();
        for (a, b) in p.data().iter().zip(orig.data()) {
            assert_eq!(*a, b * (1.0 - lr * hyper.weight_decay));
        }
        let no_decay = AdamWConfig {
            weight_decay: 0.0,
            ..hyper
        };
        let before = p.clone();
        adamw_step(&mut [&mut p], &[g], &mut state, lr, &no_decay).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adamw_first_step_hand_trace() {
        // t = 1: m = 0.1 g, v = 0.001 g², m̂ = g, v̂ = g², step = α g / (|g| + ε)
        let g = 0.3;
        let (lr, eps) = (0.01, 1e-8);
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        let mut state = AdamWState::new(&[&p]);
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut [&mut p], &[Tensor::new(vec![1], vec![g]).unwrap()], &mut state, lr, &hyper).unwrap();
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.001 * g * g) / (1.0 - 0.999);
        let expected = 2.0 - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - (2.0 - lr * g / (g + eps))).abs() < 1e-12);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adamw_shape_checks() {
        let mut p = Tensor::zeros(vec![2]);
        let mut state = AdamWState::new(&[&p]);
        let g = Tensor::zeros(vec![3]);
        assert!(adamw_step(&mut [&mut p], &[g], &mut state, 0.1, &AdamWConfig::default()).is_err());
    }

    fn tiny_setup() -> (Dataset, GeneratorConfig, TrainConfig) {
        let ds = gen_helix(100, 0.2, 1).unwrap();
        let gen = GeneratorConfig::new(1, 2, vec![8, 8], 3);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 32,
            k_batch: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        (ds, gen, cfg)
    }

    #[test]
    fn zero_epochs_returns_initial_net() {
        let (ds, gen, mut cfg) = tiny_setup();
        cfg.epochs = 0;
        let (net, report) = train(&ds, &gen, &cfg).unwrap();
        assert_eq!(net, init_generator(&gen).unwrap());
        assert!(report.steps.is_empty() && report.epoch_mean_loss.is_empty());
    }

    #[test]
    fn step_count_and_trailing_batch_rule() {
        let (ds, gen, cfg) = tiny_setup();
        // 100 = 3·32 + 4; trailing 4 rows < k+1 = 5 is dropped
        assert_eq!(cfg.steps_per_epoch(100), 3);
        let (_, report) = train(&ds, &gen, &cfg).unwrap();
        assert_eq!(report.steps.len(), 9);
        let cfg2 = TrainConfig { k_batch: 3, ..cfg };
        assert_eq!(cfg2.steps_per_epoch(100), 4);
        let (_, report) = train(&ds, &gen, &cfg2).unwrap();
        assert_eq!(report.steps.len(), 12);
    }

    #[test]
    fn batches_partition_and_graphs_are_batch_local() {
        let (ds, gen, cfg) = tiny_setup();
        let mut seen: Vec<Vec<usize>> = vec![Vec::new(); cfg.epochs];
        train_with_observer(&ds, &gen, &cfg, |info| {
            seen[info.epoch].extend_from_slice(info.batch_indices);
            let rebuilt = KnnGraph::build(&ds.x.select_rows(info.batch_indices), cfg.k_batch).unwrap();
            assert_eq!(&rebuilt, info.graph);
        })
        .unwrap();
        for (e, idx) in seen.iter_mut().enumerate() {
            assert_eq!(idx.len(), 96, "epoch {e}");
            idx.sort_unstable();
            idx.dedup();
            assert_eq!(idx.len(), 96, "duplicate rows in epoch {e}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, gen, cfg) = tiny_setup();
        let (a, ra) = train(&ds, &gen, &cfg).unwrap();
        let (b, rb) = train(&ds, &gen, &cfg).unwrap();
        assert_eq!(a, b);
        let la: Vec<u64> = ra.steps.iter().map(|s| s.loss.to_bits()).collect();
        let lb: Vec<u64> = rb.steps.iter().map(|s| s.loss.to_bits()).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn invalid_configs_rejected() {
        let (ds, gen, cfg) = tiny_setup();
        for bad in [
            TrainConfig { batch_size: 200, ..cfg.clone() },
            TrainConfig { k_batch: 32, ..cfg.clone() },
            TrainConfig { k_batch: 0, ..cfg.clone() },
            TrainConfig { learning_rate: 0.0, ..cfg.clone() },
            TrainConfig {
                kernel: KernelChoice::Fixed(KernelConfig::laplace(1.0).unwrap()),
                ..cfg.clone()
            },
        ] {
            assert!(train(&ds, &gen, &bad).is_err());
        }
        let wrong_dims = GeneratorConfig::new(2, 2, vec![4], 0);
        assert!(train(&ds, &wrong_dims, &cfg).is_err());
    }

    #[test]
    fn batch_too_small() {
        let net = init_generator(&GeneratorConfig::new(1, 1, vec![4], 0)).unwrap();
        let (x, y, eta) = (Matrix::column(&[0.0, 1.0]), Matrix::column(&[0.0, 1.0]), Matrix::zeros(2, 3));
        let batch = BatchView::new(&x, &y, &eta).unwrap();
        let k = KernelConfig::gaussian(1.0).unwrap();
        assert!(batch_loss_and_grads(&net, &batch, &k, 2).is_err());
        assert!(batch_loss_and_grads(&net, &batch, &k, 1).is_ok());
    }
}
