//! Conditional generator `g(η, x)`: a feed-forward ReLU network applied to the
//! concatenated input `[η | x]`. Sampling is a single forward pass.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{matmul, sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Linear,
    Sigmoid,
}

impl std::str::FromStr for OutputActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(OutputActivation::Linear),
            "sigmoid" => Ok(OutputActivation::Sigmoid),
            other => Err(Error::InvalidParameter(format!("unknown output activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Predictor dimension.
    pub d: usize,
    /// Noise dimension.
    pub m: usize,
    /// Response dimension.
    pub p: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub output_activation: OutputActivation,
    pub seed: u64,
}

pub const DEFAULT_NOISE_DIM: usize = 3;

impl GeneratorConfig {
    pub fn new(d: usize, p: usize, hidden: Vec<usize>, seed: u64) -> Self {
        Self {
            d,
            m: DEFAULT_NOISE_DIM,
            p,
            hidden,
            output_activation: OutputActivation::Linear,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 || self.p == 0 {
            return Err(Error::InvalidParameter(format!(
                "generator dims must be >= 1 (d = {}, m = {}, p = {})",
                self.d, self.m, self.p
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "hidden widths must be non-empty and positive, got {:?}",
                self.hidden
            )));
        }
        Ok(())
    }

    /// Layer widths `w_0 = d + m, w_1, ..., w_H = p`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.d + self.m];
        w.extend_from_slice(&self.hidden);
        w.push(self.p);
        w
    }

    /// `Σ w_i (w_{i-1} + 1)`.
    pub fn parameter_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_in × fan_out`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    config: GeneratorConfig,
    layers: Vec<DenseLayer>,
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) drawn row-major layer by layer
/// from the config seed; zero biases.
pub fn init_generator(cfg: &GeneratorConfig) -> Result<GeneratorNet> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let widths = cfg.widths();
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| std * rng.standard_normal()).collect();
            DenseLayer {
                weight: Tensor::new(vec![fan_in, fan_out], data).expect("shape matches"),
                bias: Tensor::zeros(vec![fan_out]),
            }
        })
        .collect();
    Ok(GeneratorNet {
        config: cfg.clone(),
        layers,
    })
}

impl GeneratorNet {
    pub fn from_layers(config: GeneratorConfig, layers: Vec<DenseLayer>) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        if layers.len() != widths.len() - 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} layers for {} widths",
                layers.len(),
                widths.len()
            )));
        }
        for (l, (layer, w)) in layers.iter().zip(widths.windows(2)).enumerate() {
            if layer.weight.shape() != [w[0], w[1]] || layer.bias.shape() != [w[1]] {
                return Err(Error::DimensionMismatch(format!(
                    "layer {l}: weight {:?}, bias {:?}, expected [{}, {}] and [{}]",
                    layer.weight.shape(),
                    layer.bias.shape(),
                    w[0],
                    w[1],
                    w[1]
                )));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Parameters in the order `w_0, b_0, w_1, b_1, ...`.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    pub(crate) fn check_inputs(&self, eta: &Matrix, x: &Matrix) -> Result<()> {
        if eta.cols() != self.config.m || x.cols() != self.config.d || eta.rows() != x.rows() {
            return Err(Error::DimensionMismatch(format!(
                "generator expects eta n×{} and x n×{}, got {:?} and {:?}",
                self.config.m,
                self.config.d,
                eta.shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// One forward pass per row; no iterative refinement.
    pub fn generate(&self, eta: &Matrix, x: &Matrix) -> Result<Matrix> {
        self.check_inputs(eta, x)?;
        let n = x.rows();
        let mut h = eta.hstack(x)?.into_data();
        let mut width = self.config.d + self.config.m;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let out_w = layer.bias.len();
            let mut next = matmul(&h, n, width, layer.weight.data(), out_w);
            for row in next.chunks_exact_mut(out_w) {
                for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                }
            }
            if l < last {
                next.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { 0.0 });
            } else if self.config.output_activation == OutputActivation::Sigmoid {
                next.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            h = next;
            width = out_w;
        }
        if let Some(pos) = h.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("generator output row {}", pos / width)));
        }
        Matrix::new(n, width, h)
    }

    /// Generates `n` responses at the single predictor value `x` with noise
    /// from `seed`.
    pub fn sample_at(&self, x: &[f64], n: usize, seed: u64) -> Result<Matrix> {
        if x.len() != self.config.d {
            return Err(Error::DimensionMismatch(format!(
                "conditioning point has {} coordinates, generator expects {}",
                x.len(),
                self.config.d
            )));
        }
        let eta = sample_noise(&NoiseSpec::new(self.config.m)?, n, seed);
        let xs = Matrix::from_fn(n, self.config.d, |_, j| x[j]);
        self.generate(&eta, &xs)
    }
}

pub fn generate(net: &GeneratorNet, eta: &Matrix, x: &Matrix) -> Result<Matrix> {
    net.generate(eta, x)
}

/// Standard normal noise of dimension `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseSpec {
    m: usize,
}

impl NoiseSpec {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParameter("noise dimension must be >= 1".into()));
        }
        Ok(Self { m })
    }

    pub fn dim(&self) -> usize {
        self.m
    }
}

/// `n × m` i.i.d. standard normals, row-major from the crate's seeded stream.
pub fn sample_noise(spec: &NoiseSpec, n: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(seed);
    Matrix::from_fn(n, spec.m, |_, _| rng.standard_normal())
}

// Checkpoint container, little-endian throughout:
//
//   [0..8)        magic b"CGMMDNET"
//   [8..12)       u32 format version
//   [12..16)      u32 header length H
//   [16..16+H)    UTF-8 JSON header (config, dtype, byte order, layer shapes)
//   then          f64 values: layer 0 weight (row-major), layer 0 bias, layer 1 ...
//   last 32 bytes SHA-256 of everything before it
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CGMMDNET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: GeneratorConfig,
    dtype: String,
    byte_order: String,
    layers: Vec<LayerShape>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerShape {
    weight: [usize; 2],
    bias: usize,
}

pub fn save_checkpoint(net: &GeneratorNet) -> Vec<u8> {
    let header = CheckpointHeader {
        config: net.config.clone(),
        dtype: "f64".into(),
        byte_order: "little".into(),
        layers: net
            .layers
            .iter()
            .map(|l| LayerShape {
                weight: [l.weight.shape()[0], l.weight.shape()[1]],
                bias: l.bias.len(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 8 * net.parameter_count() + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in net.parameters() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<GeneratorNet> {
    let corrupt = |msg: &str| Error::CheckpointCorrupt(msg.to_string());
    if bytes.len() < 16 + 32 {
        return Err(corrupt("payload too short"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)"));
    }
    let header_len = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds payload"))?;
    let header: CheckpointHeader = serde_json::from_slice(&body[16..header_end])
        .map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
    if header.dtype != "f64" || header.byte_order != "little" {
        return Err(corrupt("unsupported dtype or byte order"));
    }
    let mut values = body[header_end..].chunks_exact(8);
    if !values.remainder().is_empty() {
        return Err(corrupt("weight section is not a whole number of f64 values"));
    }
    let mut take = |len: usize| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            let c = values.next().ok_or_else(|| corrupt("weight section too short"))?;
            v.push(f64::from_le_bytes(c.try_into().expect("8 bytes")));
        }
        Ok(v)
    };
    let mut layers = Vec::with_capacity(header.layers.len());
    for s in &header.layers {
        let weight = Tensor::new(s.weight.to_vec(), take(s.weight[0] * s.weight[1])?)?;
        let bias = Tensor::new(vec![s.bias], take(s.bias)?)?;
        layers.push(DenseLayer { weight, bias });
    }
    if values.next().is_some() {
        return Err(corrupt("trailing weight data"));
    }
    GeneratorNet::from_layers(header.config, layers)
}

/// Hex SHA-256 of a checkpoint byte string.
pub fn checkpoint_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
