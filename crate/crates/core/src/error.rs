use thiserror::Error;

pub type Result<T> = std::result::Result<T, DacmError>;

#[derive(Debug, Error)]
pub enum DacmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("sampler selected no training points")]
    EmptySample,

    #[error("malformed data: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DacmError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        DacmError::Dimension(msg.into())
    }
}
