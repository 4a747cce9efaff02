use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent configuration, including dimension mismatches.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called with arguments outside its contract.
    #[error("usage error: {0}")]
    Usage(String),
    /// Every optimizer restart failed.
    #[error("optimization failed: {0}")]
    Optimization(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
