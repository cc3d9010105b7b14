//! Process exit codes and the error type that carries them.

use std::fmt;

use condrecon::Error;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_CHECKPOINT: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    /// Classifies a library error, falling back to `default` when the
    /// variant alone does not say whose fault it is.
    pub fn from_core(context: &str, err: Error, default: u8) -> Self {
        let code = match err {
            Error::Dataset(_) => EXIT_DATA,
            Error::CheckpointMismatch { .. } => EXIT_CHECKPOINT,
            Error::InvalidArgument { .. } => EXIT_USAGE,
            _ => default,
        };
        Self::new(code, format!("{context}: {err}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// `.ctx("loading dataset", EXIT_DATA)` on library results.
pub trait Context<T> {
    fn ctx(self, context: &str, default: u8) -> CliResult<T>;
}

impl<T> Context<T> for condrecon::Result<T> {
    fn ctx(self, context: &str, default: u8) -> CliResult<T> {
        self.map_err(|e| CliError::from_core(context, e, default))
    }
}
