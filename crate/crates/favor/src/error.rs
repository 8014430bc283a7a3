use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's contract (shape mismatch, unknown
    /// token id, too-small group, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A manifest or corpus file failed to parse or validate.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// A run configuration is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint file is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A gradient contained NaN or infinity; no update was applied.
    #[error("non-finite gradient entry at flat index {0}")]
    NonFiniteGradient(usize),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: {details}")]
    NonFiniteLoss { step: usize, details: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
