use std::path::PathBuf;

use simt_core::format::FormatError;
use simt_core::Error;
use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("numerical failure at iteration {iteration}: {source}")]
    Numerical {
        iteration: usize,
        #[source]
        source: Error,
    },

    #[error("gradient check failed for: {}", .0.join(", "))]
    GradcheckFailed(Vec<&'static str>),

    #[error("interrupted at iteration {0}; checkpoint written")]
    Interrupted(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Format { .. } | CliError::Invalid(_) => EXIT_INVALID_INPUT,
            CliError::Numerical { .. } => EXIT_NUMERICAL,
            CliError::GradcheckFailed(_) | CliError::Interrupted(_) => EXIT_FAILURE,
        }
    }

    /// Sorts a core error raised while training into bad input versus a
    /// numerical breakdown.
    pub fn from_training(err: Error) -> Self {
        match err {
            Error::Training { iteration, source } => match *source {
                e @ (Error::SingularGram
                | Error::ZeroRow { .. }
                | Error::NonFinite(_)
                | Error::NumericalUnderflow { .. }) => CliError::Numerical { iteration, source: e },
                e => CliError::Invalid(format!("iteration {iteration}: {e}")),
            },
            e => CliError::Invalid(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
