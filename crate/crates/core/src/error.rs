use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code policy:
/// `InvalidInput`/`Config`/`Manifest` are caller mistakes, the rest are
/// runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An API was driven outside its documented contract (e.g. channel count
    /// changed mid-stream, mismatched shapes).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    /// Non-finite values or a failed numerical routine.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("audio format: {0}")]
    Audio(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
