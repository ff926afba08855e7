use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("index {index} out of range for {len} nodes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("csv error at line {line}: {msg}")]
    Csv { line: u64, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::NonFinite(_) => "non_finite",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::TapeConsumed => "tape_consumed",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::CheckpointCorrupt(_) => "checkpoint_corrupt",
            Error::Csv { .. } => "csv",
            Error::Io { .. } => "io",
            Error::Diverged { .. } => "diverged",
            Error::Config(_) => "config",
            Error::Serde(_) => "serialization",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
