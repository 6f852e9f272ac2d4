use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the markpaint toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("model '{model}' does not support {height}x{width} inputs: {reason}")]
    UnsupportedDimensions {
        model: String,
        height: usize,
        width: usize,
        reason: String,
    },

    #[error("model '{0}' is not differentiable")]
    NotDifferentiable(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version mismatch: found '{found}', expected '{expected}'")]
    VersionMismatch { found: String, expected: String },

    #[error("adapter '{0}' is already registered")]
    DuplicateAdapter(String),

    #[error("unknown adapter '{identifier}' (known: {})", known.join(", "))]
    UnknownAdapter {
        identifier: String,
        known: Vec<String>,
    },

    #[error("region is empty")]
    EmptyRegion,

    #[error("corpus error: {0}")]
    Corpus(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }
}
