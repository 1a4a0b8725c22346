use advdial::Error;
use thiserror::Error as ThisError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_CONFIG_MISMATCH: i32 = 4;
pub const EXIT_DIVERGED: i32 = 5;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("run directory {dir} was created by config {found}, current config is {expected}")]
    RunMismatch {
        dir: String,
        expected: String,
        found: String,
    },
    #[error("validation failed for {0} artifact(s)")]
    ValidationFailed(usize),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::RunMismatch { .. } => EXIT_CONFIG_MISMATCH,
            CliError::ValidationFailed(_) => EXIT_FAILURE,
            CliError::Core(e) => match e {
                Error::Config(_) => EXIT_USAGE,
                Error::MissingArtifact(_) => EXIT_MISSING,
                Error::ConfigMismatch { .. } | Error::VocabMismatch { .. } => EXIT_CONFIG_MISMATCH,
                Error::Diverged(_) => EXIT_DIVERGED,
                _ => EXIT_FAILURE,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
