use std::fmt;
use std::path::PathBuf;

use illusion_core::Error as CoreError;
use thiserror::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// One violated invariant, located by its config path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration ({} problem(s))", .0.len())]
    Invalid(Vec<Diagnostic>),

    #[error("{0}")]
    Usage(String),

    #[error("cannot read {0}: {1}")]
    Read(PathBuf, #[source] std::io::Error),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) | CliError::Usage(_) => EXIT_INVALID,
            CliError::Read(..) => EXIT_FAILURE,
            CliError::Core(e) => match e {
                CoreError::Config(_)
                | CoreError::Shape(_)
                | CoreError::OutOfRange(_)
                | CoreError::Arrangement(_)
                | CoreError::ImageLoad { .. } => EXIT_INVALID,
                CoreError::Backend(_) | CoreError::PredictorUnavailable(_) => EXIT_BACKEND,
                CoreError::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_FAILURE,
            },
        }
    }
}
