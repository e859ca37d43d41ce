use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A dataset record does not match the expected schema.
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    /// Cross-record constraint violated (duplicate ids, overlapping lists).
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("embedding provider error: {0}")]
    Provider(String),

    #[error("augmentation error for sample {sample}: {message}")]
    Augmentation { sample: String, message: String },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing predictions for ids: {}", .0.join(", "))]
    MissingPredictions(Vec<String>),

    /// The message already includes the I/O error, so it is not chained as a source.
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
