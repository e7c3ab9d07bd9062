use thiserror::Error;

use crate::optimizer::OptimizationTrace;

pub type Result<T, E = StegoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum StegoError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A non-finite loss or gradient appeared during refinement. The trace
    /// holds every step completed before the failure.
    #[error("numeric failure at step {step}: {reason}")]
    Numeric {
        step: usize,
        reason: String,
        trace: Box<OptimizationTrace>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

impl StegoError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        StegoError::InvalidInput(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            StegoError::Numeric { .. } => 3,
            _ => 2,
        }
    }
}
