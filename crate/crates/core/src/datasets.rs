//! Synthetic conditional tasks with exact samplers, and the dataset CSV format.
//!
//! Per-row draw order (all from one [`SeededRng`] stream):
//!
//! - helix / circle: `x ~ N(0,1)`, `u ~ Unif[0, 2π)`, `ε1 ~ N(0,σ²)`, `ε2 ~ N(0,σ²)`.
//!   The noise terms are drawn even when `σ = 0`.
//! - linear-Gaussian: `x ~ N(0,1)`, `e ~ N(0,1)`, `y = a x + b + s e`.
//!
//! CSV layout: header `x0,...,x{d-1},y0,...,y{p-1}`, one sample per line, LF
//! endings, floats printed with Rust's shortest round-trip formatting.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Task name, or `"external"` for loaded data.
    pub task: String,
    pub sigma: Option<f64>,
    pub seed: Option<u64>,
}

impl DatasetMeta {
    pub fn external() -> Self {
        Self {
            task: "external".into(),
            sigma: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix, meta: DatasetMeta) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::DimensionMismatch(format!(
                "dataset has {} predictor rows and {} response rows",
                x.rows(),
                y.rows()
            )));
        }
        if !x.all_finite() || !y.all_finite() {
            return Err(Error::NonFinite("dataset entries".into()));
        }
        Ok(Self { x, y, meta })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn x_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn y_dim(&self) -> usize {
        self.y.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionalTask {
    /// `Y1 = 2X + U sin 2U + ε1`, `Y2 = 2X + U cos 2U + ε2`.
    Helix { sigma: f64 },
    /// `Y1 = X + 3 sin U + ε1`, `Y2 = X + 3 cos U + ε2`.
    Circle { sigma: f64 },
    /// `Y | X ~ N(aX + b, s²)`.
    LinearGaussian { a: f64, b: f64, s: f64 },
}

impl ConditionalTask {
    pub fn name(&self) -> &'static str {
        match self {
            ConditionalTask::Helix { .. } => "helix",
            ConditionalTask::Circle { .. } => "circle",
            ConditionalTask::LinearGaussian { .. } => "linear_gaussian",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ConditionalTask::Helix { sigma } | ConditionalTask::Circle { sigma } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
                }
            }
            ConditionalTask::LinearGaussian { a, b, s } => {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::InvalidParameter(format!("s must be > 0, got {s}")));
                }
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::InvalidParameter("slope/intercept must be finite".into()));
                }
            }
        }
        Ok(())
    }

    pub fn sigma(&self) -> Option<f64> {
        match *self {
            ConditionalTask::Helix { sigma } | ConditionalTask::Circle { sigma } => Some(sigma),
            ConditionalTask::LinearGaussian { .. } => None,
        }
    }

    pub fn x_dim(&self) -> usize {
        1
    }

    pub fn y_dim(&self) -> usize {
        match self {
            ConditionalTask::Helix { .. } | ConditionalTask::Circle { .. } => 2,
            ConditionalTask::LinearGaussian { .. } => 1,
        }
    }

    /// Predictor marginal, `N(0, 1)` for every task.
    pub fn sample_x(&self, rng: &mut SeededRng) -> f64 {
        rng.standard_normal()
    }

    /// One draw from the exact conditional law at `x`, appended to `out`.
    pub fn sample_response(&self, x: f64, rng: &mut SeededRng, out: &mut Vec<f64>) {
        match *self {
            ConditionalTask::Helix { sigma } => {
                let u = rng.uniform() * TAU;
                let e1 = sigma * rng.standard_normal();
                let e2 = sigma * rng.standard_normal();
                out.extend_from_slice(&helix_response(x, u, e1, e2));
            }
            ConditionalTask::Circle { sigma } => {
                let u = rng.uniform() * TAU;
                let e1 = sigma * rng.standard_normal();
                let e2 = sigma * rng.standard_normal();
                out.extend_from_slice(&circle_response(x, u, e1, e2));
            }
            ConditionalTask::LinearGaussian { a, b, s } => {
                out.push(a * x + b + s * rng.standard_normal());
            }
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidParameter("dataset size must be >= 1".into()));
        }
        let mut rng = SeededRng::new(seed);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n * self.y_dim());
        for _ in 0..n {
            let x = self.sample_x(&mut rng);
            xs.push(x);
            self.sample_response(x, &mut rng, &mut ys);
        }
        Dataset::new(
            Matrix::column(&xs),
            Matrix::new(n, self.y_dim(), ys)?,
            DatasetMeta {
                task: self.name().into(),
                sigma: self.sigma(),
                seed: Some(seed),
            },
        )
    }
}

pub fn helix_response(x: f64, u: f64, e1: f64, e2: f64) -> [f64; 2] {
    [
        2.0 * x + u * (2.0 * u).sin() + e1,
        2.0 * x + u * (2.0 * u).cos() + e2,
    ]
}

pub fn circle_response(x: f64, u: f64, e1: f64, e2: f64) -> [f64; 2] {
    [x + 3.0 * u.sin() + e1, x + 3.0 * u.cos() + e2]
}

pub fn gen_helix(n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    ConditionalTask::Helix { sigma }.generate(n, seed)
}

pub fn gen_circle(n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    ConditionalTask::Circle { sigma }.generate(n, seed)
}

pub fn gen_linear_gaussian(n: usize, a: f64, b: f64, s: f64, seed: u64) -> Result<Dataset> {
    ConditionalTask::LinearGaussian { a, b, s }.generate(n, seed)
}

/// `n` fresh draws from the task's conditional law at the predictor `x`.
pub fn true_conditional_sample(task: &ConditionalTask, x: &[f64], n: usize, seed: u64) -> Result<Matrix> {
    task.validate()?;
    if x.len() != task.x_dim() {
        return Err(Error::DimensionMismatch(format!(
            "task `{}` conditions on {} predictor(s), got {}",
            task.name(),
            task.x_dim(),
            x.len()
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(n * task.y_dim());
    for _ in 0..n {
        task.sample_response(x[0], &mut rng, &mut out);
    }
    Matrix::new(n, task.y_dim(), out)
}

fn csv_header(d: usize, p: usize) -> String {
    let cols: Vec<String> = (0..d)
        .map(|i| format!("x{i}"))
        .chain((0..p).map(|j| format!("y{j}")))
        .collect();
    cols.join(",")
}

/// Writes `x` and `y` side by side in the dataset CSV layout.
pub fn write_csv<W: Write>(mut w: W, x: &Matrix, y: &Matrix) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(Error::DimensionMismatch("x and y row counts differ".into()));
    }
    let mut buf = String::new();
    buf.push_str(&csv_header(x.cols(), y.cols()));
    buf.push('\n');
    for i in 0..x.rows() {
        let mut first = true;
        for v in x.row(i).iter().chain(y.row(i)) {
            if !first {
                buf.push(',');
            }
            first = false;
            buf.push_str(&v.to_string());
        }
        buf.push('\n');
    }
    w.write_all(buf.as_bytes())
        .map_err(|e| Error::io("<csv writer>", e))
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_csv(&mut bytes, &dataset.x, &dataset.y)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_header(fields: &csv::StringRecord) -> Result<(usize, usize)> {
    let header_err = |msg: String| Error::Csv { line: 1, msg };
    let mut d = 0;
    let mut p = 0;
    for (pos, name) in fields.iter().enumerate() {
        let expected_x = format!("x{d}");
        let expected_y = format!("y{p}");
        if p == 0 && name == expected_x {
            d += 1;
        } else if name == expected_y {
            p += 1;
        } else {
            return Err(header_err(format!(
                "unexpected column `{name}` at position {pos} (expected `{}`)",
                if p == 0 { format!("{expected_x}` or `{expected_y}") } else { expected_y }
            )));
        }
    }
    if d == 0 {
        return Err(header_err("header has no x columns".into()));
    }
    if p == 0 {
        return Err(header_err("header has no y columns".into()));
    }
    Ok((d, p))
}

/// Parses dataset CSV text. Errors carry the 1-based line number.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Csv {
        line: 1,
        msg: e.to_string(),
    })?;
    let (d, p) = parse_header(header)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != d + p {
            return Err(Error::Csv {
                line,
                msg: format!("expected {} fields, found {}", d + p, rec.len()),
            });
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Csv {
                line,
                msg: format!("non-numeric cell `{field}` in column {c}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    line,
                    msg: format!("non-finite cell `{field}` in column {c}"),
                });
            }
            if c < d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
        rows += 1;
    }
    Dataset::new(
        Matrix::new(rows, d, xs)?,
        Matrix::new(rows, p, ys)?,
        DatasetMeta::external(),
    )
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn helix_plug_in() {
        let [y1, y2] = helix_response(1.0, FRAC_PI_2, 0.0, 0.0);
        assert!((y1 - 2.0).abs() < 1e-15);
        assert!((y2 - (2.0 - PI / 2.0)).abs() < 1e-15);
        assert!((y2 - 0.429_20).abs() < 1e-5);
        assert_eq!(helix_response(-0.7, 0.0, 0.0, 0.0), [-1.4, -1.4]);
    }

    #[test]
    fn circle_plug_in_and_radius() {
        let [y1, y2] = circle_response(0.0, FRAC_PI_2, 0.0, 0.0);
        assert!((y1 - 3.0).abs() < 1e-15 && y2.abs() < 1e-15);
        let ds = gen_circle(500, 0.0, 4).unwrap();
        for i in 0..ds.len() {
            let x = ds.x.get(i, 0);
            let r2 = (ds.y.get(i, 0) - x).powi(2) + (ds.y.get(i, 1) - x).powi(2);
            assert!((r2 - 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn circle_noisy_radius_expectation() {
        let sigma = 0.2;
        let n = 200_000;
        let ds = gen_circle(n, sigma, 8).unwrap();
        let r2: Vec<f64> = (0..n)
            .map(|i| {
                let x = ds.x.get(i, 0);
                (ds.y.get(i, 0) - x).powi(2) + (ds.y.get(i, 1) - x).powi(2)
            })
            .collect();
        let mean = r2.iter().sum::<f64>() / n as f64;
        let var = r2.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let target = 9.0 + 2.0 * sigma * sigma;
        assert!((mean - target).abs() < 3.0 * se, "mean {mean} target {target} se {se}");
    }

    #[test]
    fn helix_marginal_offset_matches_quadrature() {
        // E[U sin 2U], U ~ Unif[0, 2π): composite Simpson on [0, 2π]
        let m = 20_000;
        let h = TAU / m as f64;
        let f = |u: f64| u * (2.0 * u).sin() / TAU;
        let mut quad = f(0.0) + f(TAU);
        for i in 1..m {
            quad += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        quad *= h / 3.0;
        assert!((quad - (-0.5)).abs() < 1e-9, "closed form is -1/2, got {quad}");

        let n = 200_000;
        let ds = gen_helix(n, 0.2, 21).unwrap();
        let diffs: Vec<f64> = (0..n).map(|i| ds.y.get(i, 0) - 2.0 * ds.x.get(i, 0)).collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - quad).abs() < 3.0 * se, "mean {mean} quad {quad} se {se}");
    }

    #[test]
    fn linear_gaussian_binned_mean() {
        let (a, b, s) = (1.5, -0.5, 0.8);
        let ds = gen_linear_gaussian(400_000, a, b, s, 2).unwrap();
        let x0 = 0.6;
        let ys: Vec<f64> = (0..ds.len())
            .filter(|&i| (ds.x.get(i, 0) - x0).abs() < 0.05)
            .map(|i| ds.y.get(i, 0))
            .collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        // bin half-width adds at most a*0.05 of bias on top of the CLT band
        let band = 3.0 * s / (ys.len() as f64).sqrt() + a * 0.05;
        assert!((mean - (a * x0 + b)).abs() < band);
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let a = gen_linear_gaussian(100, 1.0, 0.0, 1.0, 77).unwrap();
        let b = gen_linear_gaussian(100, 1.0, 0.0, 1.0, 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_linear_gaussian(100, 1.0, 0.0, 1.0, 78).unwrap());
        assert_eq!(gen_helix(50, 0.4, 3).unwrap(), gen_helix(50, 0.4, 3).unwrap());
    }

    #[test]
    fn invalid_tasks() {
        assert!(gen_helix(10, -0.1, 0).is_err());
        assert!(gen_linear_gaussian(10, 1.0, 0.0, 0.0, 0).is_err());
        assert!(gen_circle(0, 0.2, 0).is_err());
    }

    #[test]
    fn oracle_draws_follow_structure() {
        let x = 0.3;
        let helix = true_conditional_sample(&ConditionalTask::Helix { sigma: 0.0 }, &[x], 200, 1).unwrap();
        for r in helix.iter_rows() {
            // recover u from the curve: both coordinates share the same u
            let (dy1, dy2) = (r[0] - 2.0 * x, r[1] - 2.0 * x);
            let u = (dy1 * dy1 + dy2 * dy2).sqrt();
            assert!((u * (2.0 * u).sin() - dy1).abs() < 1e-9);
            assert!((u * (2.0 * u).cos() - dy2).abs() < 1e-9);
        }
        let circle = true_conditional_sample(&ConditionalTask::Circle { sigma: 0.0 }, &[x], 200, 1).unwrap();
        for r in circle.iter_rows() {
            assert!(((r[0] - x).powi(2) + (r[1] - x).powi(2) - 9.0).abs() < 1e-12);
        }
        let (a, b, s) = (2.0, 1.0, 0.5);
        let n = 10_000;
        let lg = true_conditional_sample(&ConditionalTask::LinearGaussian { a, b, s }, &[-1.0], n, 5).unwrap();
        let mean = lg.data().iter().sum::<f64>() / n as f64;
        assert!((mean - (a * -1.0 + b)).abs() < 3.0 * s / (n as f64).sqrt());
        assert!(true_conditional_sample(&ConditionalTask::Circle { sigma: 0.0 }, &[0.0, 1.0], 2, 1).is_err());
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let ds = gen_helix(64, 0.3, 9).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &ds.x, &ds.y).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x0,y0,y1\n"));
        assert!(!text.contains('\r'));
        let back = parse_csv(&text).unwrap();
        for (a, b) in ds.x.data().iter().chain(ds.y.data()).zip(back.x.data().iter().chain(back.y.data())) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_single_row_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.csv");
        let ds = Dataset::new(
            Matrix::from_rows(&[[0.1, -2.0]]).unwrap(),
            Matrix::from_rows(&[[1e-300]]).unwrap(),
            DatasetMeta::external(),
        )
        .unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
    }

    #[test]
    fn csv_errors_name_the_line() {
        assert!(matches!(parse_csv("x0,x1\n1,2\n"), Err(Error::Csv { line: 1, .. })));
        assert!(matches!(parse_csv("y0\n1\n"), Err(Error::Csv { line: 1, .. })));
        assert!(matches!(parse_csv("x0,z0\n1,2\n"), Err(Error::Csv { line: 1, .. })));
        assert!(matches!(parse_csv("x0,y0\n1,2\n3\n"), Err(Error::Csv { line: 3, .. })));
        assert!(matches!(parse_csv("x0,y0\n1,2\n3,4\nfoo,1\n"), Err(Error::Csv { line: 4, .. })));
        assert!(matches!(parse_csv("x0,y0\n1,inf\n"), Err(Error::Csv { line: 2, .. })));
        assert!(matches!(load_csv("/nonexistent/file.csv"), Err(Error::Io { .. })));
    }

    #[test]
    fn csv_header_only_is_empty_dataset() {
        let ds = parse_csv("x0,y0,y1\n").unwrap();
        assert_eq!(ds.len(), 0);
        assert_eq!((ds.x_dim(), ds.y_dim()), (1, 2));
    }
}
