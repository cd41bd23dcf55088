use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("dictionary capacity exhausted after {0} codes")]
    CapacityExhausted(u64),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("constants file: {0}")]
    Constants(String),

    #[error("cache store does not match the inputs: {0}")]
    CacheInvalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
