use thiserror::Error;

use crate::container::ContainerError;

#[derive(Debug, Error)]
pub enum BctError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("calibration missing: {0}")]
    CalibrationMissing(String),
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BctError>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> BctError {
    BctError::InvalidArgument(msg.into())
}
