//! Error types shared across the codec.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoccError {
    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid beam index {beam} (sensor has {num_beams} beams)")]
    InvalidBeam { beam: usize, num_beams: usize },

    #[error("invalid sensor intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("empty frame: no points to encode")]
    EmptyFrame,

    #[error("coordinate out of range: {0}")]
    RangeError(String),

    #[error("corrupt octree: {0}")]
    CorruptTree(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index out of bounds: {0}")]
    IndexOutOfBounds(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("autodiff usage error: {0}")]
    TapeUsage(String),

    #[error("invalid pmf: {0}")]
    InvalidPmf(String),

    #[error("truncated stream: {0}")]
    Truncation(String),

    #[error("bitstream format error: {0}")]
    Format(String),

    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("encoder/decoder desync: {0}")]
    InternalSync(String),

    #[error("missing intrinsics: mode requires a sensor intrinsics file")]
    MissingIntrinsics,

    #[error("round-trip failure: {0}")]
    RoundTrip(String),

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("rate-distortion curves do not overlap")]
    NoOverlap,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LoccError>;
