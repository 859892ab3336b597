use std::path::PathBuf;

use thiserror::Error;

use crate::convops::ConvError;
use crate::tensor::TensorError;

/// Errors from model building, training, decoding and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<ConvError> for Error {
    fn from(e: ConvError) -> Self {
        match e {
            ConvError::Config(m) | ConvError::Unsupported(m) => Error::Config(m),
            ConvError::Tensor(t) => Error::Tensor(t),
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
