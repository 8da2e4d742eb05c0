//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or vector shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A parameter value is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A value violated a documented range or structural contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A dataset file could not be read or decoded.
    #[error("ingestion failed for {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    /// An input raster is not in a supported pixel format.
    #[error("unsupported image format for {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Model or checkpoint state is unusable.
    #[error("invalid state: {0}")]
    State(String),

    /// A configuration file or key could not be interpreted.
    #[error("configuration error: {0}")]
    Config(String),

    /// A request violates the evaluation protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-friendly category used by the CLI exit path.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Contract(_) => "contract",
            Error::Ingestion { .. } => "ingestion",
            Error::Format { .. } => "format",
            Error::State(_) => "state",
            Error::Config(_) => "config",
            Error::Protocol(_) => "protocol",
            Error::Io(_) => "io",
        }
    }
}
