//! Command-line front end: `train`, `sample`, `eval` and `estimate`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
//! single JSON line `{"error":{"kind":...,"message":...}}` on stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datasets::{self, ConditionalTask, Dataset};
use crate::ecmmd::{ecmmd_hat_discrete, estimate};
use crate::error::{Error, Result};
use crate::evaluation::{
    build_report, conditional_mmd_at, ecmmd_on_holdout, ConditionalMetric, HoldoutMetric, ReportInputs,
    DEFAULT_X_GRID,
};
use crate::generator::{checkpoint_hash, init_generator, load_checkpoint, save_checkpoint, GeneratorConfig, OutputActivation};
use crate::kernels::{median_heuristic_subsampled, KernelConfig, KernelFamily};
use crate::knn::KnnGraph;
use crate::matrix::Matrix;
use crate::rng::derive_seed;
use crate::trainer::{default_k_for_batch, train, AdamWConfig, KernelChoice, TrainConfig, DEFAULT_BATCH_SIZE};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_METRICS_FILE: &str = "train_metrics.jsonl";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const ESTIMATE_METRICS_FILE: &str = "estimate_metrics.jsonl";

/// Rows used for the median bandwidth heuristic on large samples.
const BANDWIDTH_SUBSAMPLE: usize = 1000;

const DATA_STREAM: u64 = 100;
const INIT_STREAM: u64 = 101;
const HOLDOUT_STREAM: u64 = 102;

#[derive(Debug, Parser)]
#[command(name = "cgmmd", version, about = "Train and evaluate conditional generators with the k-NN ECMMD objective")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a generator on a synthetic task or a dataset CSV.
    Train(TrainArgs),
    /// Draw samples from a trained generator at given conditioning values.
    Sample(SampleArgs),
    /// Evaluate a trained generator against a task oracle or a holdout CSV.
    Eval(EvalArgs),
    /// Compute the k-NN ECMMD estimate between two CSVs sharing predictors.
    Estimate(EstimateArgs),
}

#[derive(Debug, Args)]
struct SharedArgs {
    /// TOML config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct TaskArgs {
    /// Synthetic task: helix, circle or linear_gaussian.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Linear-Gaussian slope.
    #[arg(long)]
    slope: Option<f64>,
    /// Linear-Gaussian intercept.
    #[arg(long)]
    intercept: Option<f64>,
    /// Linear-Gaussian conditional standard deviation.
    #[arg(long)]
    cond_std: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: SharedArgs,
    #[command(flatten)]
    task: TaskArgs,
    /// Training data CSV instead of a synthetic task.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic sample size.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    k_batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Hidden widths, e.g. `64,64`.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    noise_dim: Option<usize>,
    /// linear or sigmoid.
    #[arg(long)]
    output_activation: Option<String>,
    /// Fixed gaussian bandwidth (default: median heuristic on the first batch).
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Redraw the training noise every epoch.
    #[arg(long)]
    resample_noise: bool,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[command(flatten)]
    shared: SharedArgs,
    #[arg(long)]
    ckpt: PathBuf,
    /// Conditioning point (comma-separated coordinates); repeatable.
    #[arg(long, allow_hyphen_values = true)]
    x: Vec<String>,
    /// CSV with header `x0,...` listing conditioning points.
    #[arg(long)]
    x_csv: Option<PathBuf>,
    /// Samples per conditioning point.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: SharedArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    /// Holdout dataset CSV for the ECMMD metric.
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// Size of the synthetic holdout drawn from the task.
    #[arg(long)]
    holdout_n: Option<usize>,
    /// Conditioning points for conditional MMD², comma-separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x_grid: Option<Vec<f64>>,
    #[arg(long)]
    n_gen: Option<usize>,
    #[arg(long)]
    n_true: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    bandwidth: Option<f64>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// CSV holding the observed responses.
    #[arg(long)]
    a: PathBuf,
    /// CSV holding the comparison responses (same x columns as `--a`).
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    /// gaussian or laplace.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Group rows by an integer label in `x0` instead of k-NN neighborhoods.
    #[arg(long)]
    discrete: bool,
}

/// Structure of the TOML config file. Unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub task: Option<TaskSection>,
    pub data: Option<DataSection>,
    pub generator: Option<GeneratorSection>,
    pub train: Option<TrainSection>,
    pub sample: Option<SampleSection>,
    pub eval: Option<EvalSection>,
    pub estimate: Option<EstimateSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: Option<String>,
    pub sigma: Option<f64>,
    pub n: Option<usize>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub cond_std: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub hidden: Option<Vec<usize>>,
    pub noise_dim: Option<usize>,
    pub output_activation: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub k_batch: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub bandwidth: Option<f64>,
    pub resample_noise: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub x: Option<Vec<f64>>,
    pub n: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub x_grid: Option<Vec<f64>>,
    pub n_gen: Option<usize>,
    pub n_true: Option<usize>,
    pub k: Option<usize>,
    pub bandwidth: Option<f64>,
    pub holdout_n: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    pub k: Option<usize>,
    pub kernel: Option<String>,
    pub bandwidth: Option<f64>,
    pub discrete: Option<bool>,
}

pub fn parse_config(text: &str) -> Result<FileConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config(&text)
        }
    }
}

/// Resolved training run, embedded in the metrics stream.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedTrain {
    pub seed: u64,
    pub data: DataSource,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Task { task: ConditionalTask, n: usize, data_seed: u64 },
    Csv { path: PathBuf },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses arguments, runs one subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match &cli.command {
        Command::Train(a) => with_threads(&a.shared, |cfg| cmd_train(a, cfg)),
        Command::Sample(a) => with_threads(&a.shared, |cfg| cmd_sample(a, cfg)),
        Command::Eval(a) => with_threads(&a.shared, |cfg| cmd_eval(a, cfg)),
        Command::Estimate(a) => with_threads(&a.shared, |cfg| cmd_estimate(a, cfg)),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("{}", json!({"error": {"kind": "usage", "message": msg}}));
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            1
        }
    }
}

fn with_threads(shared: &SharedArgs, body: impl FnOnce(&FileConfig) -> CmdResult + Send) -> CmdResult {
    let cfg = load_config(shared.config.as_deref())?;
    let threads = shared.threads.or(cfg.threads);
    match threads {
        Some(0) => Err(Failure::Usage("--threads must be >= 1".into())),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            pool.install(|| body(&cfg))
        }
        None => body(&cfg),
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn resolve_task(args: &TaskArgs, section: Option<&TaskSection>) -> std::result::Result<Option<ConditionalTask>, Failure> {
    let kind = args.task.clone().or_else(|| section.and_then(|s| s.kind.clone()));
    let Some(kind) = kind else { return Ok(None) };
    let pick = |flag: Option<f64>, file: Option<f64>, default: f64| flag.or(file).unwrap_or(default);
    let s = |f: fn(&TaskSection) -> Option<f64>| section.and_then(f);
    let task = match kind.as_str() {
        "helix" => ConditionalTask::Helix {
            sigma: pick(args.sigma, s(|t| t.sigma), 0.2),
        },
        "circle" => ConditionalTask::Circle {
            sigma: pick(args.sigma, s(|t| t.sigma), 0.2),
        },
        "linear_gaussian" => ConditionalTask::LinearGaussian {
            a: pick(args.slope, s(|t| t.slope), 1.0),
            b: pick(args.intercept, s(|t| t.intercept), 0.0),
            s: pick(args.cond_std, s(|t| t.cond_std), 1.0),
        },
        other => return Err(Failure::Usage(format!("unknown task `{other}`"))),
    };
    task.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(Some(task))
}

fn usage<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| Failure::Usage(e.to_string()))
}

fn resolve_train(args: &TrainArgs, file: &FileConfig) -> std::result::Result<(ResolvedTrain, Dataset), Failure> {
    let seed = args.shared.seed.or(file.seed).unwrap_or(0);
    let task = resolve_task(&args.task, file.task.as_ref())?;
    let data_path = args.data.clone().or_else(|| file.data.as_ref().and_then(|d| d.path.clone()));
    let (source, dataset) = match (task, data_path) {
        (Some(_), Some(_)) => return Err(Failure::Usage("give either --task or --data, not both".into())),
        (None, None) => return Err(Failure::Usage("one of --task or --data is required".into())),
        (Some(task), None) => {
            let n = args.n.or(file.task.as_ref().and_then(|t| t.n)).unwrap_or(4000);
            let data_seed = derive_seed(seed, DATA_STREAM);
            let ds = usage(task.generate(n, data_seed))?;
            (DataSource::Task { task, n, data_seed }, ds)
        }
        (None, Some(path)) => {
            let ds = datasets::load_csv(&path)?;
            (DataSource::Csv { path }, ds)
        }
    };
    if dataset.len() < 2 {
        return Err(Failure::Usage("training needs at least 2 rows".into()));
    }

    let g = file.generator.as_ref();
    let hidden = args.hidden.clone().or_else(|| g.and_then(|g| g.hidden.clone())).unwrap_or(vec![64, 64]);
    let m = args.noise_dim.or(g.and_then(|g| g.noise_dim)).unwrap_or(crate::generator::DEFAULT_NOISE_DIM);
    let output_activation: OutputActivation = match args.output_activation.clone().or_else(|| g.and_then(|g| g.output_activation.clone())) {
        Some(s) => usage(s.parse())?,
        None => OutputActivation::Linear,
    };
    let generator = GeneratorConfig {
        d: dataset.x_dim(),
        m,
        p: dataset.y_dim(),
        hidden,
        output_activation,
        seed: derive_seed(seed, INIT_STREAM),
    };
    usage(generator.validate())?;

    let t = file.train.as_ref();
    let tf = |f: fn(&TrainSection) -> Option<f64>| t.and_then(f);
    let batch_size = args
        .batch_size
        .or(t.and_then(|t| t.batch_size))
        .unwrap_or(DEFAULT_BATCH_SIZE.min(dataset.len()));
    let defaults = AdamWConfig::default();
    let bandwidth = args.bandwidth.or(tf(|t| t.bandwidth));
    let train = TrainConfig {
        epochs: args.epochs.or(t.and_then(|t| t.epochs)).unwrap_or(200),
        batch_size,
        k_batch: args
            .k_batch
            .or(t.and_then(|t| t.k_batch))
            .unwrap_or_else(|| default_k_for_batch(batch_size).min(batch_size.saturating_sub(1)).max(1)),
        learning_rate: args.lr.or(tf(|t| t.learning_rate)).unwrap_or(crate::trainer::DEFAULT_LEARNING_RATE),
        adamw: AdamWConfig {
            beta1: tf(|t| t.beta1).unwrap_or(defaults.beta1),
            beta2: tf(|t| t.beta2).unwrap_or(defaults.beta2),
            eps: tf(|t| t.eps).unwrap_or(defaults.eps),
            weight_decay: args.weight_decay.or(tf(|t| t.weight_decay)).unwrap_or(defaults.weight_decay),
        },
        seed,
        kernel: match bandwidth {
            Some(h) => KernelChoice::Fixed(usage(KernelConfig::gaussian(h))?),
            None => KernelChoice::MedianAuto,
        },
        resample_noise_each_epoch: args.resample_noise || t.and_then(|t| t.resample_noise).unwrap_or(false),
    };
    usage(train.validate(dataset.len()))?;
    Ok((
        ResolvedTrain {
            seed,
            data: source,
            generator,
            train,
        },
        dataset,
    ))
}

fn cmd_train(args: &TrainArgs, file: &FileConfig) -> CmdResult {
    let (resolved, dataset) = resolve_train(args, file)?;
    let out = &args.shared.out;
    ensure_out(out)?;
    let (net, report) = train(&dataset, &resolved.generator, &resolved.train)?;
    let ckpt = save_checkpoint(&net);
    write_file(&out.join(CHECKPOINT_FILE), &ckpt)?;

    let mut lines = Vec::new();
    let mut push = |v: serde_json::Value| {
        lines.extend_from_slice(v.to_string().as_bytes());
        lines.push(b'\n');
    };
    push(json!({"kind": "config", "config": resolved}));
    for s in &report.steps {
        push(json!({"kind": "step", "step": s.step, "epoch": s.epoch, "loss": s.loss, "wall_ms": s.wall_ms}));
    }
    for (epoch, loss) in report.epoch_mean_loss.iter().enumerate() {
        push(json!({"kind": "epoch", "epoch": epoch, "mean_loss": loss}));
    }
    push(json!({
        "kind": "summary",
        "steps": report.steps.len(),
        "kernel": report.kernel,
        "checkpoint": CHECKPOINT_FILE,
        "checkpoint_sha256": checkpoint_hash(&ckpt),
        "wall_ms": report.wall_ms,
    }));
    write_file(&out.join(TRAIN_METRICS_FILE), &lines)?;

    let last = report.epoch_mean_loss.last().copied();
    println!(
        "trained {} steps; final epoch mean loss {}; checkpoint {}",
        report.steps.len(),
        last.map_or("n/a".to_string(), |l| format!("{l:.6e}")),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(crate::generator::GeneratorNet, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let net = load_checkpoint(&bytes)?;
    Ok((net, checkpoint_hash(&bytes)))
}

fn parse_points(raw: &[String], d: usize) -> std::result::Result<Vec<Vec<f64>>, Failure> {
    raw.iter()
        .map(|s| {
            let coords: std::result::Result<Vec<f64>, _> = s.split(',').map(|c| c.trim().parse::<f64>()).collect();
            match coords {
                Ok(c) if c.len() == d && c.iter().all(|v| v.is_finite()) => Ok(c),
                Ok(c) => Err(Failure::Usage(format!(
                    "conditioning point `{s}` has {} coordinates, generator expects {d}",
                    c.len()
                ))),
                Err(_) => Err(Failure::Usage(format!("conditioning point `{s}` is not numeric"))),
            }
        })
        .collect()
}

fn read_x_csv(path: &Path, d: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Csv { line: 1, msg: e.to_string() })?;
    let expected: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    if header.iter().take(d).collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Csv {
            line: 1,
            msg: format!("expected leading columns {}", expected.join(",")),
        });
    }
    let mut points = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let p: std::result::Result<Vec<f64>, _> = rec.iter().take(d).map(|c| c.trim().parse::<f64>()).collect();
        match p {
            Ok(p) if p.len() == d => points.push(p),
            _ => {
                return Err(Error::Csv {
                    line,
                    msg: "malformed conditioning point".into(),
                })
            }
        }
    }
    Ok(points)
}

fn cmd_sample(args: &SampleArgs, file: &FileConfig) -> CmdResult {
    let (net, _) = read_checkpoint(&args.ckpt)?;
    let d = net.config().d;
    let seed = args.shared.seed.or(file.seed).unwrap_or(0);
    let s = file.sample.as_ref();
    let n = args.n.or(s.and_then(|s| s.n)).unwrap_or(1000);
    let mut points = parse_points(&args.x, d)?;
    if let Some(path) = &args.x_csv {
        points.extend(read_x_csv(path, d)?);
    }
    if points.is_empty() {
        if let Some(xs) = s.and_then(|s| s.x.clone()) {
            if d != 1 {
                return Err(Failure::Usage("config `sample.x` lists scalar points; use --x for d > 1".into()));
            }
            points = xs.into_iter().map(|v| vec![v]).collect();
        }
    }
    if points.is_empty() {
        return Err(Failure::Usage("give conditioning points with --x or --x-csv".into()));
    }
    ensure_out(&args.shared.out)?;
    let mut xs = Vec::with_capacity(points.len() * n * d);
    let mut ys = Vec::with_capacity(points.len() * n * net.config().p);
    for (i, pt) in points.iter().enumerate() {
        let y = net.sample_at(pt, n, derive_seed(seed, i as u64))?;
        for _ in 0..n {
            xs.extend_from_slice(pt);
        }
        ys.extend_from_slice(y.data());
    }
    let rows = points.len() * n;
    let x = Matrix::new(rows, d, xs)?;
    let y = Matrix::new(rows, net.config().p, ys)?;
    let path = args.shared.out.join(SAMPLES_FILE);
    let mut buf = Vec::new();
    datasets::write_csv(&mut buf, &x, &y)?;
    write_file(&path, &buf)?;
    println!("wrote {rows} samples to {}", path.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs, file: &FileConfig) -> CmdResult {
    let start = std::time::Instant::now();
    let (net, hash) = read_checkpoint(&args.ckpt)?;
    let baseline = init_generator(net.config())?;
    let seed = args.shared.seed.or(file.seed).unwrap_or(0);
    let e = file.eval.as_ref();
    let task = resolve_task(&args.task, file.task.as_ref())?;
    let holdout_path = args.holdout.clone();
    if task.is_none() && holdout_path.is_none() {
        return Err(Failure::Usage("one of --task or --holdout is required".into()));
    }
    let n_gen = args.n_gen.or(e.and_then(|e| e.n_gen)).unwrap_or(1000);
    let n_true = args.n_true.or(e.and_then(|e| e.n_true)).unwrap_or(1000);
    let grid = args.x_grid.clone().or_else(|| e.and_then(|e| e.x_grid.clone())).unwrap_or(DEFAULT_X_GRID.to_vec());

    let holdout = match (&holdout_path, task) {
        (Some(path), _) => Some(datasets::load_csv(path)?),
        (None, Some(task)) => {
            let n = args.holdout_n.or(e.and_then(|e| e.holdout_n)).unwrap_or(2000);
            Some(usage(task.generate(n, derive_seed(seed, HOLDOUT_STREAM)))?)
        }
        (None, None) => None,
    };
    if let Some(h) = &holdout {
        if h.x_dim() != net.config().d || h.y_dim() != net.config().p {
            return Err(Failure::Runtime(Error::DimensionMismatch(format!(
                "holdout has d = {}, p = {}; generator maps d = {} to p = {}",
                h.x_dim(),
                h.y_dim(),
                net.config().d,
                net.config().p
            ))));
        }
    }
    if let Some(task) = task {
        if task.x_dim() != net.config().d || task.y_dim() != net.config().p {
            return Err(Failure::Runtime(Error::DimensionMismatch(format!(
                "task `{}` does not match the generator's dimensions",
                task.name()
            ))));
        }
    }

    let bandwidth = match args.bandwidth.or(e.and_then(|e| e.bandwidth)) {
        Some(h) => h,
        None => {
            let reference = match (task, &holdout) {
                (Some(task), _) => {
                    let mut rows = Vec::new();
                    for (i, x) in grid.iter().enumerate() {
                        let s = datasets::true_conditional_sample(&task, &[*x], n_true.min(BANDWIDTH_SUBSAMPLE), derive_seed(seed, 200 + i as u64))?;
                        rows.extend(s.iter_rows().map(<[f64]>::to_vec));
                    }
                    Matrix::from_rows(&rows)?
                }
                (None, Some(h)) => h.y.clone(),
                (None, None) => unreachable!("checked above"),
            };
            median_heuristic_subsampled(&reference, BANDWIDTH_SUBSAMPLE)?
        }
    };
    let kernel = usage(KernelConfig::gaussian(bandwidth))?;

    let mut conditional = Vec::new();
    if let Some(task) = task {
        for (i, x) in grid.iter().enumerate() {
            let s = derive_seed(seed, 300 + i as u64);
            conditional.push(ConditionalMetric {
                x: vec![*x],
                mmd2: conditional_mmd_at(&net, &task, &[*x], n_gen, n_true, &kernel, s)?,
                baseline_mmd2: Some(conditional_mmd_at(&baseline, &task, &[*x], n_gen, n_true, &kernel, s)?),
            });
        }
    }
    let holdout_metric = match &holdout {
        Some(h) => {
            let k = args
                .k
                .or(e.and_then(|e| e.k))
                .unwrap_or_else(|| default_k_for_batch(h.len()).min(h.len().saturating_sub(1)));
            let s = derive_seed(seed, 400);
            Some(HoldoutMetric {
                ecmmd: ecmmd_on_holdout(&net, h, &kernel, k, s)?,
                baseline_ecmmd: Some(ecmmd_on_holdout(&baseline, h, &kernel, k, s)?),
                k,
                n: h.len(),
                signed: true,
            })
        }
        None => None,
    };
    let report = build_report(ReportInputs {
        checkpoint_sha256: hash,
        task,
        kernel: Some(kernel),
        seed,
        n_gen,
        n_true,
        conditional,
        holdout: holdout_metric,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })?;
    ensure_out(&args.shared.out)?;
    let mut text = report.to_json()?;
    text.push('\n');
    write_file(&args.shared.out.join(EVAL_REPORT_FILE), text.as_bytes())?;

    let mut summary = String::from("eval");
    for m in &report.conditional {
        summary.push_str(&format!(" mmd2[x={}]={:.6e}", m.x[0], m.mmd2));
    }
    if let Some(h) = &report.holdout {
        summary.push_str(&format!(" holdout_ecmmd={:.6e}", h.ecmmd));
    }
    println!("{summary}");
    Ok(())
}

fn cmd_estimate(args: &EstimateArgs, file: &FileConfig) -> CmdResult {
    let a = datasets::load_csv(&args.a)?;
    let b = datasets::load_csv(&args.b)?;
    if a.x.shape() != b.x.shape() || a.x.data().iter().zip(b.x.data()).any(|(p, q)| p.to_bits() != q.to_bits()) {
        return Err(Failure::Runtime(Error::DimensionMismatch(
            "x columns of the two files differ".into(),
        )));
    }
    if a.y_dim() != b.y_dim() {
        return Err(Failure::Runtime(Error::DimensionMismatch(format!(
            "response dimensions differ: {} vs {}",
            a.y_dim(),
            b.y_dim()
        ))));
    }
    let s = file.estimate.as_ref();
    let family: KernelFamily = match args.kernel.clone().or_else(|| s.and_then(|s| s.kernel.clone())) {
        Some(k) => usage(k.parse())?,
        None => KernelFamily::Gaussian,
    };
    let bandwidth = match args.bandwidth.or(s.and_then(|s| s.bandwidth)) {
        Some(h) => h,
        None if a.len() >= 2 => median_heuristic_subsampled(&a.y, BANDWIDTH_SUBSAMPLE)?,
        None => 1.0,
    };
    let kernel = usage(KernelConfig::new(family, bandwidth))?;
    let discrete = args.discrete || s.and_then(|s| s.discrete).unwrap_or(false);
    let n = a.len();
    let (value, k) = if discrete {
        if a.x_dim() != 1 {
            return Err(Failure::Usage("--discrete needs a single integer x column".into()));
        }
        let labels: Vec<i64> = a
            .x
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && v.abs() < 9.0e15 {
                    Ok(v as i64)
                } else {
                    Err(Failure::Usage(format!("label {v} is not an integer")))
                }
            })
            .collect::<std::result::Result<_, _>>()?;
        (ecmmd_hat_discrete(&labels, &a.y, &b.y, kernel)?, None)
    } else {
        if n < 2 {
            return Err(Failure::Usage("the k-NN estimator needs at least 2 rows".into()));
        }
        let k = args
            .k
            .or(s.and_then(|s| s.k))
            .unwrap_or_else(|| default_k_for_batch(n).min(n - 1));
        let graph = usage(KnnGraph::build(&a.x, k))?;
        (estimate(&graph, &a.y, &b.y, kernel)?, Some(k))
    };
    ensure_out(&args.shared.out)?;
    let record = json!({
        "kind": "estimate",
        "estimator": if discrete { "discrete" } else { "knn" },
        "ecmmd": value,
        "n": n,
        "k": k,
        "kernel": kernel,
        "a": args.a,
        "b": args.b,
    });
    let mut line = record.to_string();
    line.push('\n');
    let path = args.shared.out.join(ESTIMATE_METRICS_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
    println!("{value}");
    Ok(())
}
