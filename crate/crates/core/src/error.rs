use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("pool invariant violated: {0}")]
    PoolInvariant(String),

    #[error("unlabeled pool is exhausted")]
    ExhaustedPool,

    #[error("labeled pool is empty, nothing to train on")]
    EmptyLabeledPool,

    #[error("evaluation split has no ground-truth boxes")]
    EmptyGroundTruth,

    #[error("non-finite loss at cycle {cycle}, step {step}: {detail}")]
    Divergence {
        cycle: usize,
        step: usize,
        detail: String,
    },

    #[error("config hash mismatch: expected {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
