use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("event record {index} is invalid: {reason}")]
    InvalidEvent { index: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("self-check failed: {0}")]
    CheckFailed(String),

    #[error("non-finite loss at stage {stage} step {step}")]
    NonFinite { stage: u8, step: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Validation failures (bad input or config) as opposed to runtime faults.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::InvalidConfig(_) | Error::InvalidEvent { .. } | Error::Shape(_) | Error::Range(_) | Error::Parse { .. })
    }
}
