//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape disagreement.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed input data (IDX files, bundles, config files).
    #[error("parse error: {0}")]
    Parse(String),

    /// Invalid configuration detected before any work starts.
    #[error("config error: {0}")]
    Config(String),

    /// API misuse (e.g. backward on a non-scalar, eval on the strong branch).
    #[error("usage error: {0}")]
    Usage(String),

    /// Weight or checkpoint stream that cannot be loaded.
    #[error("load error: {0}")]
    Load(String),

    /// Runtime training failure (divergence, non-finite loss).
    #[error("training error: {0}")]
    Training(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
