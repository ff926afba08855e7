//! How close a generator's conditional law is to the truth: per-point
//! conditional MMD², holdout ECMMD, and the report that carries them.

use serde::{Deserialize, Serialize};

use crate::datasets::{ConditionalTask, Dataset};
use crate::ecmmd::{estimate, mmd2_vstat};
use crate::error::{Error, Result};
use crate::generator::{sample_noise, GeneratorNet, NoiseSpec};
use crate::kernels::KernelConfig;
use crate::knn::KnnGraph;
use crate::matrix::Matrix;
use crate::rng::{derive_seed, SeededRng};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Default conditioning points for the synthetic tasks.
pub const DEFAULT_X_GRID: [f64; 3] = [-1.0, 0.0, 1.0];

/// Anything that can draw one response per predictor row.
pub trait ConditionalSampler {
    fn sample_rows(&self, x: &Matrix, seed: u64) -> Result<Matrix>;
}

impl ConditionalSampler for GeneratorNet {
    fn sample_rows(&self, x: &Matrix, seed: u64) -> Result<Matrix> {
        let eta = sample_noise(&NoiseSpec::new(self.config().m)?, x.rows(), seed);
        self.generate(&eta, x)
    }
}

impl ConditionalSampler for ConditionalTask {
    fn sample_rows(&self, x: &Matrix, seed: u64) -> Result<Matrix> {
        self.validate()?;
        if x.cols() != self.x_dim() {
            return Err(Error::DimensionMismatch(format!(
                "task `{}` conditions on {} predictor(s), got {}",
                self.name(),
                self.x_dim(),
                x.cols()
            )));
        }
        let mut rng = SeededRng::new(seed);
        let mut out = Vec::with_capacity(x.rows() * self.y_dim());
        for i in 0..x.rows() {
            self.sample_response(x.get(i, 0), &mut rng, &mut out);
        }
        Matrix::new(x.rows(), self.y_dim(), out)
    }
}

/// V-statistic MMD² between `n_gen` sampler draws and `n_true` oracle draws at
/// the conditioning point `x`.
pub fn conditional_mmd_at<S: ConditionalSampler + ?Sized>(
    sampler: &S,
    task: &ConditionalTask,
    x: &[f64],
    n_gen: usize,
    n_true: usize,
    kernel: &KernelConfig,
    seed: u64,
) -> Result<f64> {
    if n_gen == 0 || n_true == 0 {
        return Err(Error::InvalidParameter("conditional MMD needs n_gen, n_true >= 1".into()));
    }
    let xs_gen = Matrix::from_fn(n_gen, x.len(), |_, j| x[j]);
    let generated = sampler.sample_rows(&xs_gen, derive_seed(seed, 1))?;
    let truth = crate::datasets::true_conditional_sample(task, x, n_true, derive_seed(seed, 2))?;
    mmd2_vstat(kernel, &generated, &truth)
}

/// Builds the `k`-NN graph on the holdout predictors, draws one response per
/// row from `sampler`, and returns the (signed) ECMMD estimate against the
/// holdout responses.
pub fn ecmmd_on_holdout<S: ConditionalSampler + ?Sized>(
    sampler: &S,
    holdout: &Dataset,
    kernel: &KernelConfig,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if k >= holdout.len() {
        return Err(Error::InvalidParameter(format!(
            "k = {k} needs more than {} holdout rows",
            holdout.len()
        )));
    }
    let graph = KnnGraph::build(&holdout.x, k)?;
    let z = sampler.sample_rows(&holdout.x, seed)?;
    estimate(&graph, &holdout.y, &z, *kernel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalMetric {
    pub x: Vec<f64>,
    pub mmd2: f64,
    /// Same metric for the untrained (initialization) network.
    pub baseline_mmd2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoldoutMetric {
    pub ecmmd: f64,
    pub baseline_ecmmd: Option<f64>,
    pub k: usize,
    pub n: usize,
    /// The k-NN estimator is not a squared norm and may be negative.
    pub signed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub crate_version: String,
    pub checkpoint_sha256: String,
    pub task: Option<ConditionalTask>,
    pub kernel: KernelConfig,
    pub seed: u64,
    pub n_gen: usize,
    pub n_true: usize,
    /// Conditional discrepancies are biased V-statistics (nonnegative).
    pub mmd2_estimator: String,
    pub conditional: Vec<ConditionalMetric>,
    pub holdout: Option<HoldoutMetric>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub checkpoint_sha256: String,
    pub task: Option<ConditionalTask>,
    pub kernel: Option<KernelConfig>,
    pub seed: u64,
    pub n_gen: usize,
    pub n_true: usize,
    pub conditional: Vec<ConditionalMetric>,
    pub holdout: Option<HoldoutMetric>,
    pub wall_ms: f64,
}

pub fn build_report(inputs: ReportInputs) -> Result<EvalReport> {
    if inputs.conditional.is_empty() && inputs.holdout.is_none() {
        return Err(Error::InvalidParameter("report needs at least one metric".into()));
    }
    let kernel = inputs
        .kernel
        .ok_or_else(|| Error::InvalidParameter("report needs the evaluation kernel".into()))?;
    for m in &inputs.conditional {
        if !(m.mmd2 >= 0.0) || m.baseline_mmd2.is_some_and(|b| !(b >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "conditional MMD² at {:?} is negative or NaN",
                m.x
            )));
        }
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint_sha256: inputs.checkpoint_sha256,
        task: inputs.task,
        kernel,
        seed: inputs.seed,
        n_gen: inputs.n_gen,
        n_true: inputs.n_true,
        mmd2_estimator: "v-statistic (biased, nonnegative)".into(),
        conditional: inputs.conditional,
        holdout: inputs.holdout,
        wall_ms: inputs.wall_ms,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "report schema version {} is not supported",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{init_generator, GeneratorConfig};

    fn helix() -> ConditionalTask {
        ConditionalTask::Helix { sigma: 0.2 }
    }

    #[test]
    fn single_draw_is_two_minus_two_k() {
        let net = init_generator(&GeneratorConfig::new(1, 2, vec![8], 1)).unwrap();
        let kern = KernelConfig::gaussian(1.5).unwrap();
        let v = conditional_mmd_at(&net, &helix(), &[1.0], 1, 1, &kern, 4).unwrap();
        let g = net.sample_rows(&Matrix::column(&[1.0]), derive_seed(4, 1)).unwrap();
        let t = crate::datasets::true_conditional_sample(&helix(), &[1.0], 1, derive_seed(4, 2)).unwrap();
        let expected = 2.0 - 2.0 * kern.eval_unchecked(g.row(0), t.row(0));
        assert!((v - expected).abs() < 1e-15);
        assert!(v >= 0.0);
    }

    #[test]
    fn evaluation_is_deterministic_and_pure() {
        let net = init_generator(&GeneratorConfig::new(1, 2, vec![8], 1)).unwrap();
        let before = net.clone();
        let kern = KernelConfig::gaussian(1.0).unwrap();
        let a = conditional_mmd_at(&net, &helix(), &[0.0], 50, 60, &kern, 3).unwrap();
        let b = conditional_mmd_at(&net, &helix(), &[0.0], 50, 60, &kern, 3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let holdout = helix().generate(80, 5).unwrap();
        let h1 = ecmmd_on_holdout(&net, &holdout, &kern, 5, 2).unwrap();
        let h2 = ecmmd_on_holdout(&net, &holdout, &kern, 5, 2).unwrap();
        assert_eq!(h1.to_bits(), h2.to_bits());
        assert_eq!(net, before);
    }

    #[test]
    fn holdout_k_too_large() {
        let holdout = helix().generate(10, 5).unwrap();
        let kern = KernelConfig::gaussian(1.0).unwrap();
        assert!(ecmmd_on_holdout(&helix(), &holdout, &kern, 10, 0).is_err());
    }

    #[test]
    fn report_requires_a_metric() {
        let inputs = ReportInputs {
            kernel: Some(KernelConfig::gaussian(1.0).unwrap()),
            ..Default::default()
        };
        assert!(build_report(inputs).is_err());
    }

    #[test]
    fn report_round_trips_and_carries_hash() {
        let report = build_report(ReportInputs {
            checkpoint_sha256: "ab".repeat(32),
            task: Some(helix()),
            kernel: Some(KernelConfig::gaussian(0.123_456_789_012_345_67).unwrap()),
            seed: 11,
            n_gen: 10,
            n_true: 12,
            conditional: vec![ConditionalMetric {
                x: vec![1.0],
                mmd2: 0.1 + 0.2,
                baseline_mmd2: Some(1e-310),
            }],
            holdout: Some(HoldoutMetric {
                ecmmd: -0.003,
                baseline_ecmmd: None,
                k: 5,
                n: 100,
                signed: true,
            }),
            wall_ms: 12.5,
        })
        .unwrap();
        let text = report.to_json().unwrap();
        assert!(text.contains(&"ab".repeat(32)));
        assert_eq!(EvalReport::from_json(&text).unwrap(), report);
    }
}
