use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid covariance: {0}")]
    Covariance(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("non-finite value at reverse step {step}: {what}")]
    NonFinite { step: usize, what: String },
    #[error("malformed encoder file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
