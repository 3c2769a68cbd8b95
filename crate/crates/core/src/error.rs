use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum LamError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("mesh level alignment: {0}")]
    Alignment(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("file version mismatch: {0}")]
    Version(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("training aborted: {0}")]
    TrainAbort(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LamError>;

impl LamError {
    pub fn dim(msg: impl Into<String>) -> Self {
        LamError::Dim(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        LamError::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        LamError::Config(msg.into())
    }
}
