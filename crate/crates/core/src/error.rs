//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an operation's arguments was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A recording or model file could not be decoded.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Optimization produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    TrainingDivergence { epoch: usize, batch: usize, loss: f64 },

    /// Every trial of a run was rejected; no prediction can be made.
    #[error("run {run} undecidable: all trials rejected")]
    RunUndecidable { run: u32 },

    /// Both inputs to a statistical test were constant.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format { offset, detail: detail.into() }
    }
}
