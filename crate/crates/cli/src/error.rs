use ctxtrace_core::Error as CoreError;
use thiserror::Error;

use crate::validate::Violation;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;
pub const EXIT_INVALID: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{} invariant violation(s)", .0.len())]
    Invalid(Vec<Violation>),
}

impl CliError {
    /// 0 success, 1 usage, 2 backend, 3 validation or invariant failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(CoreError::Config(_)) => EXIT_USAGE,
            CliError::Core(e) if e.is_backend() => EXIT_BACKEND,
            CliError::Core(_) | CliError::Invalid(_) => EXIT_INVALID,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
