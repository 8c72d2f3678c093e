use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("ctc target needs at least {required} frames, got {frames}")]
    CtcTargetTooLong { frames: usize, required: usize },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("shape mismatch for parameter `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("checkpoint fingerprint mismatch: expected {expected}, got {got}")]
    FingerprintMismatch { expected: String, got: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("training diverged at step {step} (batch {batch_ids:?}): non-finite loss")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
