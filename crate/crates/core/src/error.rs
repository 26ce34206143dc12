use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;
use crate::trainer::Checkpoint;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error at {file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Training produced a non-finite loss or gradient. `last` holds the
    /// state after the last finite step.
    #[error("training diverged at step {step}: {cause}")]
    Diverged {
        step: usize,
        cause: TensorError,
        last: Box<Checkpoint>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for NaN/Inf failures, either direct or during training.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Tensor(TensorError::Numeric { .. }) | Error::Diverged { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
