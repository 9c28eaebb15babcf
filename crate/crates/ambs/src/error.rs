//! Error taxonomy shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user-supplied configuration: formula text, geometry, hyperparameters.
    #[error("config: {0}")]
    Config(String),
    /// A documented precondition of an operation was violated by the caller.
    #[error("precondition: {0}")]
    Precondition(String),
    /// An exact computation was requested on a problem too large for it.
    #[error("size guard: {0}")]
    SizeGuard(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
    pub fn size_guard(msg: impl Into<String>) -> Self {
        Error::SizeGuard(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
