use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("index {index} out of range for size {size} in {context}")]
    Index {
        context: &'static str,
        index: usize,
        size: usize,
    },

    #[error("tape already consumed by a previous backward pass; re-run the forward pass")]
    StaleTape,

    #[error("parameter `{0}` has no gradient")]
    UninitializedGradient(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("training failed at step {step}: {reason}")]
    TrainingFailure { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 2 configuration, 3 data/format, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Schedule(_) => 2,
            Error::TrainingFailure { .. } => 4,
            _ => 3,
        }
    }
}
