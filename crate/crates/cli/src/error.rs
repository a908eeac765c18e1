use std::process::ExitCode;

/// Failure of a subcommand, split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config values or missing inputs (exit 1).
    #[error("{0}")]
    Config(String),
    /// Anything that goes wrong once inputs are valid (exit 2).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            Self::Config(_) => ExitCode::from(1),
            Self::Runtime(_) => ExitCode::from(2),
        }
    }
}

impl From<fgd::FgdError> for CliError {
    fn from(e: fgd::FgdError) -> Self {
        use fgd::FgdError::*;
        match e {
            InvalidConfig(_)
            | InvalidParameter(_)
            | InvalidSchedule(_)
            | TimestepOutOfRange { .. } => Self::Config(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Wraps an I/O error with the path it concerns.
pub fn io_error(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}
