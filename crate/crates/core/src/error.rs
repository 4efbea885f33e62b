use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Error, Debug)]
pub enum DcnError {
    /// Shapes, indices or arguments that violate an operation's preconditions.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A dataset file that is missing, truncated or malformed.
    #[error("ingestion error in {path} at byte {offset}: {reason}")]
    Ingest {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("malformed model file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DcnError>;

pub(crate) fn invalid(msg: impl Into<String>) -> DcnError {
    DcnError::InvalidInput(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DcnError {
    let path = path.into();
    move |source| DcnError::Io { path, source }
}
