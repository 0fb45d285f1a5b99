use thiserror::Error;

#[derive(Debug, Error)]
pub enum GlowError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),

    #[error("no monotonic alignment: {text} tokens cannot cover {frames} frames")]
    NoAlignment { text: usize, frames: usize },

    #[error("instance {text}x{frames} exceeds the enumeration bound ({max_text}x{max_frames})")]
    EnumerationBound {
        text: usize,
        frames: usize,
        max_text: usize,
        max_frames: usize,
    },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    InvalidToken { id: usize, vocab: usize },

    #[error("unknown speaker {id} (model has {count})")]
    UnknownSpeaker { id: usize, count: usize },

    #[error("sequence too short: {0}")]
    TooShort(String),

    #[error("activation normalization used before initialization")]
    NotInitialized,

    #[error("singular 1x1 convolution kernel (|det| = {0:e})")]
    SingularKernel(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid duration label {0} (must be >= 1)")]
    InvalidDuration(f64),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GlowError>;
