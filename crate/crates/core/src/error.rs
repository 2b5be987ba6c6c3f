use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input at line {line}: {message}")]
    MalformedInput { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("context overflow: sequence of {len} tokens exceeds the model context of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("training diverged at step {step}: {message}")]
    TrainingDiverged { step: usize, message: String },

    #[error("data configuration error: {0}")]
    DataConfig(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid_arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by numeric blow-up rather than by bad input.
    pub fn is_numeric_failure(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::TrainingDiverged { .. })
    }
}
