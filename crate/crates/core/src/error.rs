use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlicError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlicError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown label class {class} (class count {num_classes})")]
    UnknownClass { class: usize, num_classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged on client {client} at round {round}, local step {step}: {reason}")]
    Divergence {
        client: usize,
        round: usize,
        step: usize,
        reason: String,
    },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl FlicError {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        FlicError::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlicError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        FlicError::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
