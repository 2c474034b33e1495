use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("value out of range at index {index}: {reason}")]
    OutOfRange { index: usize, reason: String },

    #[error("timestamps decrease at index {index} ({prev} -> {next})")]
    NonMonotonicTime { index: usize, prev: u64, next: u64 },

    #[error("field arrays have different lengths: {0}")]
    LengthMismatch(String),

    #[error("bin index {index} out of range for {bins} bins")]
    IndexOutOfRange { index: usize, bins: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("group mismatch: {0}")]
    GroupMismatch(String),

    #[error("group arithmetic violated: {0}")]
    GroupArithmetic(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
