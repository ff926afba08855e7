//! Nearest-neighbor ECMMD estimators, plain MMD² and the test oracles.
//!
//! The k-NN estimator averages the `H` statistic over the directed edges of a
//! k-NN graph on the predictors:
//!
//! ```text
//! ECMMD² ≈ 1/(n k) Σ_i Σ_{j ∈ N(i)} H(W_i, W_j),   W_i = (y_i, z_i)
//! ```
//!
//! The graph never contains self loops, so no diagonal correction is applied.
//! Per-node partial sums may be computed in parallel, but they are always
//! added in node order, so results are bitwise independent of thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::ConditionalTask;
use crate::error::{Error, Result};
use crate::kernels::KernelConfig;
use crate::knn::KnnGraph;
use crate::matrix::Matrix;
use crate::rng::SeededRng;

/// Observed responses `y`, comparison responses `z` (row `i` conditioned on
/// predictor `i`), the predictor graph and the kernel.
#[derive(Debug, Clone, Copy)]
pub struct EcmmdInputs<'a> {
    graph: &'a KnnGraph,
    y: &'a Matrix,
    z: &'a Matrix,
    kernel: KernelConfig,
}

impl<'a> EcmmdInputs<'a> {
    pub fn new(graph: &'a KnnGraph, y: &'a Matrix, z: &'a Matrix, kernel: KernelConfig) -> Result<Self> {
        kernel.validate()?;
        y.ensure_same_shape(z, "observed and generated responses")?;
        if y.rows() != graph.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} response rows for a graph on {} nodes",
                y.rows(),
                graph.n()
            )));
        }
        Ok(Self { graph, y, z, kernel })
    }
}

fn ordered_sum(parts: &[f64]) -> f64 {
    parts.iter().sum()
}

pub fn ecmmd_hat(inputs: &EcmmdInputs<'_>) -> f64 {
    let EcmmdInputs { graph, y, z, kernel } = *inputs;
    let per_node: Vec<f64> = (0..graph.n())
        .into_par_iter()
        .map(|i| {
            let (yi, zi) = (y.row(i), z.row(i));
            graph
                .neighbors_unchecked(i)
                .iter()
                .map(|&j| kernel.h_unchecked(yi, zi, y.row(j), z.row(j)))
                .sum::<f64>()
        })
        .collect();
    ordered_sum(&per_node) / (graph.n() * graph.k()) as f64
}

/// Validating wrapper around [`ecmmd_hat`].
pub fn estimate(graph: &KnnGraph, y: &Matrix, z: &Matrix, kernel: KernelConfig) -> Result<f64> {
    Ok(ecmmd_hat(&EcmmdInputs::new(graph, y, z, kernel)?))
}

/// Averages `H` over `M` independent generated draws per edge before the
/// neighbor sum. With one draw this is bitwise identical to [`ecmmd_hat`].
pub fn ecmmd_hat_derandomized(
    graph: &KnnGraph,
    y: &Matrix,
    z_draws: &[Matrix],
    kernel: KernelConfig,
) -> Result<f64> {
    if z_draws.is_empty() {
        return Err(Error::InvalidParameter("derandomized estimator needs at least one draw".into()));
    }
    for z in z_draws {
        EcmmdInputs::new(graph, y, z, kernel)?;
    }
    let m = z_draws.len() as f64;
    let per_node: Vec<f64> = (0..graph.n())
        .into_par_iter()
        .map(|i| {
            let yi = y.row(i);
            graph
                .neighbors_unchecked(i)
                .iter()
                .map(|&j| {
                    let yj = y.row(j);
                    let total: f64 = z_draws
                        .iter()
                        .map(|z| kernel.h_unchecked(yi, z.row(i), yj, z.row(j)))
                        .sum();
                    total / m
                })
                .sum::<f64>()
        })
        .collect();
    Ok(ordered_sum(&per_node) / (graph.n() * graph.k()) as f64)
}

/// Exact-match neighborhoods for categorical predictors:
/// `1/n Σ_i 1/|G(i)| Σ_{j ∈ G(i)} H(W_i, W_j)` with `G(i) = {j : x_j = x_i}`
/// (which contains `i`).
pub fn ecmmd_hat_discrete(labels: &[i64], y: &Matrix, z: &Matrix, kernel: KernelConfig) -> Result<f64> {
    kernel.validate()?;
    y.ensure_same_shape(z, "observed and generated responses")?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidParameter("discrete estimator needs at least one sample".into()));
    }
    if y.rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} labels for {} response rows",
            y.rows()
        )));
    }
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let per_node: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let group = &groups[&labels[i]];
            let (yi, zi) = (y.row(i), z.row(i));
            let s: f64 = group
                .iter()
                .map(|&j| kernel.h_unchecked(yi, zi, y.row(j), z.row(j)))
                .sum();
            s / group.len() as f64
        })
        .collect();
    Ok(ordered_sum(&per_node) / n as f64)
}

fn mean_kernel(kernel: &KernelConfig, a: &Matrix, b: &Matrix) -> f64 {
    let per_row: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            (0..b.rows()).map(|j| kernel.eval_unchecked(ai, b.row(j))).sum::<f64>()
        })
        .collect();
    ordered_sum(&per_row) / (a.rows() * b.rows()) as f64
}

/// Biased (V-statistic) MMD² between the row samples `a` and `b`, diagonal
/// terms included. Rounding can leave an exact zero a few ulps negative, so the
/// result is clamped at zero.
pub fn mmd2_vstat(kernel: &KernelConfig, a: &Matrix, b: &Matrix) -> Result<f64> {
    kernel.validate()?;
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InvalidParameter("MMD needs non-empty samples".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "MMD samples have dimensions {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let v = mean_kernel(kernel, a, a) + mean_kernel(kernel, b, b) - 2.0 * mean_kernel(kernel, a, b);
    Ok(v.max(0.0))
}

/// Closed-form `MMD²(N(μ1, s1²), N(μ2, s2²))` under the 1-D gaussian kernel
/// with bandwidth `h`, using
/// `E K(A, B) = h / sqrt(h² + σa² + σb²) · exp(-(μa - μb)² / (2 (h² + σa² + σb²)))`
/// for independent Gaussians `A`, `B`.
pub fn mmd2_gaussian_analytic(mu1: f64, s1: f64, mu2: f64, s2: f64, h: f64) -> Result<f64> {
    for (name, v) in [("s1", s1), ("s2", s2), ("h", h)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    let ek = |ma: f64, sa: f64, mb: f64, sb: f64| {
        let v = h * h + sa * sa + sb * sb;
        h / v.sqrt() * (-(ma - mb) * (ma - mb) / (2.0 * v)).exp()
    };
    if mu1 == mu2 && s1 == s2 {
        return Ok(0.0);
    }
    Ok(ek(mu1, s1, mu1, s1) + ek(mu2, s2, mu2, s2) - 2.0 * ek(mu1, s1, mu2, s2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_outer: usize,
}

/// Monte-Carlo evaluation of the population ECMMD between the conditional laws
/// of `y_law` and `z_law`:
/// `E[K(Y,Y') + K(Z,Z') - K(Y,Z') - K(Z,Y')]` with `X ~ P_X` and the pairs
/// `(Y, Z)`, `(Y', Z')` drawn independently given `X`.
pub fn ecmmd_mc_oracle(
    y_law: &ConditionalTask,
    z_law: &ConditionalTask,
    kernel: &KernelConfig,
    n_outer: usize,
    seed: u64,
) -> Result<McEstimate> {
    kernel.validate()?;
    y_law.validate()?;
    z_law.validate()?;
    if n_outer == 0 {
        return Err(Error::InvalidParameter("n_outer must be >= 1".into()));
    }
    if y_law.y_dim() != z_law.y_dim() || y_law.x_dim() != z_law.x_dim() {
        return Err(Error::DimensionMismatch("compared laws live on different spaces".into()));
    }
    let mut rng = SeededRng::new(seed);
    let p = y_law.y_dim();
    let mut buf = Vec::with_capacity(4 * p);
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for t in 0..n_outer {
        let x = y_law.sample_x(&mut rng);
        buf.clear();
        y_law.sample_response(x, &mut rng, &mut buf);
        y_law.sample_response(x, &mut rng, &mut buf);
        z_law.sample_response(x, &mut rng, &mut buf);
        z_law.sample_response(x, &mut rng, &mut buf);
        let (y, yp, z, zp) = (&buf[..p], &buf[p..2 * p], &buf[2 * p..3 * p], &buf[3 * p..]);
        let term = kernel.eval_unchecked(y, yp) + kernel.eval_unchecked(z, zp)
            - kernel.eval_unchecked(y, zp)
            - kernel.eval_unchecked(z, yp);
        // Welford
        let delta = term - mean;
        mean += delta / (t + 1) as f64;
        m2 += delta * (term - mean);
    }
    let std_error = if n_outer > 1 {
        (m2 / (n_outer - 1) as f64 / n_outer as f64).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(McEstimate {
        estimate: mean,
        std_error,
        n_outer,
    })
}
