use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum PulseError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("version mismatch: expected `{expected}`, found `{found}`")]
    Version { expected: String, found: String },

    #[error("missing array `{0}`")]
    MissingArray(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("subject `{0}` has no baseline (label 1) windows")]
    NoBaseline(String),

    #[error("degenerate channel `{channel}` for subject `{subject}` (std {std:e})")]
    DegenerateChannel {
        subject: String,
        channel: String,
        std: f64,
    },

    #[error("missing channel {0}")]
    MissingChannel(String),

    #[error("training diverged at {0}")]
    Diverged(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PulseError>;

impl From<serde_json::Error> for PulseError {
    fn from(e: serde_json::Error) -> Self {
        PulseError::Format(e.to_string())
    }
}
