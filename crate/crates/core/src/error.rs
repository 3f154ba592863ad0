use std::io;

/// Errors produced anywhere in the pruning toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("backward called without a recorded forward pass: {0}")]
    NoForward(String),

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("conv unit {0} is not prunable")]
    NotPrunable(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not a checkpoint file")]
    NotACheckpoint,

    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("data format error: {0}")]
    DataFormat(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
