//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An index (class label, domain id, site index) out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input file (bad magic, truncated payload, count mismatch).
    #[error("format error: {0}")]
    Format(String),

    /// A contract of the computation graph was violated (e.g. non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training aborted at step {step}: {reason}")]
    TrainAborted { step: usize, reason: String },

    /// Aggregation over an empty result group.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
