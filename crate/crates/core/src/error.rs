use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("policies use different vocabularies or feature dimensions")]
    PolicyMismatch,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("group {group} has no members")]
    EmptyGroup { group: usize },

    #[error("unknown group id {group} (partition has {groups} groups)")]
    UnknownGroup { group: usize, groups: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("density ratio is unbounded (zero probability at outcome {index})")]
    UnboundedRatio { index: usize },

    #[error("policy snapshot is frozen")]
    Frozen,

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("llm client: {0}")]
    Llm(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
