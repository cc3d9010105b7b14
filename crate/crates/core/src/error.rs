use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid {field}: {reason}")]
    InvalidArgument { field: &'static str, reason: String },
    #[error("infeasible mask: {center} center columns exceed the budget of {budget} columns")]
    InfeasibleMask { center: usize, budget: usize },
    #[error("image of {height}x{width} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("checkpoint does not match its config; differing keys: {}", .keys.join(", "))]
    CheckpointMismatch { keys: Vec<String> },
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("non-finite loss at epoch {epoch} step {step} (lambda {lambda}, lr {lr}); snapshot: {snapshot:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        lambda: f64,
        lr: f64,
        snapshot: Option<PathBuf>,
    },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field,
            reason: reason.into(),
        }
    }

    pub fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
