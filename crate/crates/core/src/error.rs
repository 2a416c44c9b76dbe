use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An operation was invoked outside its contract.
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid configuration (layer specs, shift settings, run configs).
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed binary file (TSTN tensor or TSCK checkpoint).
    #[error("format error: {0}")]
    Format(String),
    /// Dataset ingestion failure (manifest or tensor files).
    #[error("ingestion error: {0}")]
    Ingest(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
