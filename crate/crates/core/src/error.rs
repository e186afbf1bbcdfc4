use thiserror::Error;

use tdd_tensor::TensorError;

use crate::pipeline::Checkpoint;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {path}: field `{field}`: {msg}")]
    Format {
        path: String,
        field: String,
        msg: String,
    },
    #[error("size error in {path}: expected {expected} payload bytes, found {found}")]
    Size {
        path: String,
        expected: u64,
        found: u64,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: usize,
        last_good: Box<Checkpoint>,
    },
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// Broad failure class, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Argument(_) | Error::Config(_) => ErrorClass::Usage,
            Error::Numeric(_) | Error::NonFiniteLoss { .. } => ErrorClass::Numeric,
            Error::Tensor(TensorError::NonFinite(_)) => ErrorClass::Numeric,
            Error::Tensor(TensorError::Argument { .. } | TensorError::Shape { .. }) => {
                ErrorClass::Usage
            }
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
