use thiserror::Error;

use crate::image::Shape;

pub type Result<T, E = FgdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FgdError {
    #[error("image dimensions must be positive, got {0}")]
    DegenerateShape(Shape),
    #[error("expected {expected} values, got {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("denoiser failed: {0}")]
    Denoiser(String),
    #[error("malformed filter tensor: {0}")]
    MalformedTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
