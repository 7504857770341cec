//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation precondition was violated (non-scalar loss, epoch out of
    /// range, zero epochs, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// CKA on inputs with no variance across samples.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Bad configuration file or flag combination.
    #[error("config error: {0}")]
    Config(String),

    /// Stored file failed checksum or structural validation.
    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    /// IO failure with the path that caused it.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk data (manifest lines, CSV rows, checkpoint headers).
    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn integrity(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Integrity { path: path.into(), reason: reason.into() }
    }

    pub fn parse(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
