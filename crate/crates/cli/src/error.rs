//! Error classification for the process exit contract: 0 success, 1 usage,
//! 2 data, 3 numeric failure.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: ExitCode::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: ExitCode::Data, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError { code: ExitCode::Numeric, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// IO problems on declared inputs/outputs count as data errors.
pub fn io_data(context: &str, err: std::io::Error) -> CliError {
    CliError::data(format!("{context}: {err}"))
}
