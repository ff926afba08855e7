//! Bounded positive-definite kernels, the median bandwidth heuristic, gram
//! matrices and the four-term `H` statistic.
//!
//! Conventions (fixed so that checkpoints and reports are portable):
//!
//! ```text
//! gaussian: K(a, b) = exp(-‖a - b‖² / (2 h²))
//! laplace:  K(a, b) = exp(-‖a - b‖₁ / h)
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_euclidean, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Laplace,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(KernelFamily::Gaussian),
            "laplace" => Ok(KernelFamily::Laplace),
            other => Err(Error::InvalidParameter(format!("unknown kernel family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelConfig {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        let cfg = Self { family, bandwidth };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth)
    }

    pub fn laplace(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Laplace, bandwidth)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel bandwidth must be positive and finite, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }

    /// Kernel value without shape checks. Callers guarantee `a.len() == b.len()`.
    #[inline]
    pub fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let d2 = squared_euclidean(a, b);
                (-d2 / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
            KernelFamily::Laplace => {
                let d1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
                (-d1 / self.bandwidth).exp()
            }
        }
    }

    /// Four-term statistic without shape checks.
    #[inline]
    pub fn h_unchecked(&self, yi: &[f64], zi: &[f64], yj: &[f64], zj: &[f64]) -> f64 {
        self.eval_unchecked(yi, yj) - self.eval_unchecked(yi, zj) - self.eval_unchecked(zi, yj)
            + self.eval_unchecked(zi, zj)
    }
}

/// One observation `W = (y, z)`: an observed response and a comparison
/// (usually generated) response of the same dimension.
#[derive(Debug, Clone, Copy)]
pub struct PairedSample<'a> {
    y: &'a [f64],
    z: &'a [f64],
}

impl<'a> PairedSample<'a> {
    pub fn new(y: &'a [f64], z: &'a [f64]) -> Result<Self> {
        if y.len() != z.len() {
            return Err(Error::DimensionMismatch(format!(
                "paired sample y has length {}, z has length {}",
                y.len(),
                z.len()
            )));
        }
        Ok(Self { y, z })
    }

    pub fn y(&self) -> &'a [f64] {
        self.y
    }

    pub fn z(&self) -> &'a [f64] {
        self.z
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }
}

pub fn eval_kernel(cfg: &KernelConfig, a: &[f64], b: &[f64]) -> Result<f64> {
    cfg.validate()?;
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "kernel arguments have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cfg.eval_unchecked(a, b))
}

/// `K(yi,yj) - K(yi,zj) - K(zi,yj) + K(zi,zj)`, the inner product of the
/// embedding differences `φ(yi)-φ(zi)` and `φ(yj)-φ(zj)`.
pub fn h_statistic(cfg: &KernelConfig, wi: &PairedSample<'_>, wj: &PairedSample<'_>) -> Result<f64> {
    cfg.validate()?;
    if wi.dim() != wj.dim() {
        return Err(Error::DimensionMismatch(format!(
            "paired samples have dimensions {} and {}",
            wi.dim(),
            wj.dim()
        )));
    }
    Ok(cfg.h_unchecked(wi.y, wi.z, wj.y, wj.z))
}

/// Median of all `n(n-1)/2` pairwise Euclidean distances between rows.
///
/// An even count takes the mean of the two middle values. When the median is
/// zero (e.g. every row identical) the fallback bandwidth `1.0` is returned.
pub fn median_heuristic_bandwidth(points: &Matrix) -> Result<f64> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "median heuristic needs at least 2 points, got {n}"
        )));
    }
    if !points.all_finite() {
        return Err(Error::NonFinite("median heuristic input".into()));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let ri = points.row(i);
        for j in (i + 1)..n {
            dists.push(squared_euclidean(ri, points.row(j)).sqrt());
        }
    }
    let m = dists.len();
    let mid = m / 2;
    let (_, &mut upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let median = if m % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// Median heuristic on at most `max_points` evenly strided rows, for samples
/// too large for the quadratic pass.
pub fn median_heuristic_subsampled(points: &Matrix, max_points: usize) -> Result<f64> {
    let n = points.rows();
    if n <= max_points {
        return median_heuristic_bandwidth(points);
    }
    let max_points = max_points.max(2);
    let idx: Vec<usize> = (0..max_points).map(|t| t * n / max_points).collect();
    median_heuristic_bandwidth(&points.select_rows(&idx))
}

/// Entry `(i, j)` is `K(a_i, b_j)`. Rows are filled in parallel; each entry is
/// computed independently so the result does not depend on the thread count.
pub fn gram_matrix(cfg: &KernelConfig, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    cfg.validate()?;
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "gram matrix operands have {} and {} columns",
            a.cols(),
            b.cols()
        )));
    }
    let m = b.rows();
    let mut out = Matrix::zeros(a.rows(), m);
    if m == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(i, row)| {
            let ai = a.row(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = cfg.eval_unchecked(ai, b.row(j));
            }
        });
    Ok(out)
}
