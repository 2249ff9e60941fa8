use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was not met (bad dimensions, k > n, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Wrong magic, unsupported version, or an inconsistent header.
    #[error("{}: format error: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    /// The payload ended early or has trailing bytes.
    #[error("{}: corrupt payload: {msg}", path.display())]
    Corrupt { path: PathBuf, msg: String },

    /// Decoded data violates a domain invariant (non-finite values, bad labels).
    #[error("validation error: {0}")]
    Validation(String),

    /// L2 normalization of a zero vector.
    #[error("normalization error: {0}")]
    Normalization(String),

    /// Non-finite loss, gradient or intermediate tensor.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
