use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("input shape mismatch: expected {expected}, got {actual}")]
    InputShape { expected: usize, actual: usize },

    #[error("label {label} outside [0, {num_classes})")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("layout mismatch: expected length {expected}, got {actual}")]
    Layout { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("target sparsity {requested} is below the prior mask sparsity {prior}")]
    Monotonicity { requested: f64, prior: f64 },

    #[error("sparsity is undefined: mask has no prunable parameters")]
    UndefinedSparsity,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no participants to aggregate")]
    NoParticipants,

    #[error("cannot partition {samples} samples across {clients} clients")]
    InfeasiblePartition { samples: usize, clients: usize },

    #[error("client {client} has no data")]
    NoData { client: usize },

    #[error("batch size {batch_size} exceeds shard size {shard_size} of client {client}")]
    BatchTooLarge {
        client: usize,
        batch_size: usize,
        shard_size: usize,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input (config, flags, schema)
    /// rather than by a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::InvalidSpec(_))
    }
}
