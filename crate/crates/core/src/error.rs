use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. Variants mirror the contract failures the
/// numeric layers can raise (shape mismatches, domain violations) plus
/// the usual I/O and parsing failures from dataset and checkpoint code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}; diagnostic snapshot written to {snapshot}")]
    NonFiniteLoss { iteration: usize, snapshot: PathBuf },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
