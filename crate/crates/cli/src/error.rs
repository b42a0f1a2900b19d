use std::fmt;

/// CLI failure with its exit code: 2 parse, 3 validation, 4 numerical,
/// 5 configuration.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

pub const EXIT_PARSE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_CONFIG: i32 = 5;

impl CliError {
    pub fn parse(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_PARSE,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ipdborrow::Error> for CliError {
    fn from(e: ipdborrow::Error) -> Self {
        use ipdborrow::Error::*;
        match &e {
            Config(_) | InvalidArgument(_) => CliError::config(e.to_string()),
            SchemaMismatch(_) => CliError::validation(e.to_string()),
            Rank(_) | NonFinite(_) | Sampling(_) | Domain(_) => {
                CliError::numerical(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::parse(format!("i/o error: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
