use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("size cap exceeded: {0}")]
    CapExceeded(String),

    #[error("numerical rank {effective} below requested rank {requested}")]
    RankDeficient { effective: usize, requested: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("run diverged: {0}")]
    Diverged(String),

    #[error("no feasible rank: maximal capacity {max_capacity} does not exceed {required}")]
    Infeasible { max_capacity: f64, required: f64 },

    #[error("estimate undefined: {0}")]
    Undefined(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
