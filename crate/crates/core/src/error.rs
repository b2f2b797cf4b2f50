use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("not a rotation matrix: {0}")]
    NotARotation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty segment: no masked pixel has a valid depth")]
    EmptySegment,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("not enough points: need more than {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("occlusion {occlusion} leaves {visible} visible points, at least {min} required")]
    TooMuchOcclusion { occlusion: f64, visible: usize, min: usize },
    #[error("batch normalization in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("point behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("occlusion factor undefined: projected pixel count is zero")]
    ZeroProjection,
}

pub type Result<T> = core::result::Result<T, Error>;
