use std::fmt;

use latentguard_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::runtime(message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        e if e.is_data_error() => EXIT_DATA,
        Error::Input(_) | Error::Stratification(_) | Error::Shape(_) => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}
