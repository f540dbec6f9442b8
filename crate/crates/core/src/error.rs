use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid layer schedule: {0}")]
    InvalidSchedule(String),

    #[error("configuration {config:?} is not a subset of the schedule's self-attention layers")]
    ConfigMismatch { config: Vec<usize> },

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: &'static str, detail: String },

    #[error("router head is untrained; train it before routing")]
    UntrainedRouter,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
