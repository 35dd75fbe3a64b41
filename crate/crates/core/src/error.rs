use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StarError {
    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate bins: {0}")]
    DegenerateBins(String),

    #[error("series too short: {len} points, need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("checkpoint mode mismatch: file holds '{found}', caller expected '{expected}'")]
    ModeMismatch { found: String, expected: String },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = StarError> = std::result::Result<T, E>;

impl StarError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StarError::Io {
            path: path.into(),
            source,
        }
    }
}
