use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    /// Tensor extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// The caller asked for something the operation does not support.
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, FitError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FitError::Dimension(msg.into()))
}

pub(crate) fn usage_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FitError::Usage(msg.into()))
}
