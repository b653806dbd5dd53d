use thiserror::Error;

use crate::diff::DiffError;

/// Errors raised by the modelling pipeline.
#[derive(Debug, Error)]
pub enum IrtError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("item {} has all discriminations equal to zero", .item + 1)]
    DegenerateItem { item: usize },

    #[error("item {} has zero variance", .item + 1)]
    ZeroVariance { item: usize },

    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("non-finite objective after {retries} redraws at iteration {iteration}")]
    Divergence {
        iteration: usize,
        retries: usize,
        /// Last unconstrained location/log-scale pair with a finite objective.
        last_finite: Option<Box<(Vec<f64>, Vec<f64>)>>,
    },

    #[error("principal axis factoring did not converge in {iterations} iterations (max change {max_change:e})")]
    NonConvergence {
        iterations: usize,
        max_change: f64,
        last_loadings: Vec<f64>,
    },

    #[error("encoder training diverged at epoch {epoch}")]
    EncoderDivergence {
        epoch: usize,
        /// Best checkpoint reached before the divergence.
        best: Option<Box<crate::encoder::EncoderNet>>,
    },

    #[error("artifact mismatch: expected hash {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl IrtError {
    /// Process exit code: 2 for validation problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            IrtError::Diff(_)
            | IrtError::Divergence { .. }
            | IrtError::NonConvergence { .. }
            | IrtError::EncoderDivergence { .. }
            | IrtError::DegenerateItem { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, IrtError>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(IrtError::Contract(msg.into()))
}
