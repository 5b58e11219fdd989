//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("empty partition side: {0}")]
    EmptyPartition(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: loss became non-finite")]
    Diverged { epoch: usize },

    #[error("no counterfactual found within radius {max_radius} for sample {index}")]
    CfNotFound { index: usize, max_radius: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv schema error: {0}")]
    Schema(String),

    #[error("csv parse error at row {row}: {message}")]
    CsvRow { row: usize, message: String },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Attach a path to an io error.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
