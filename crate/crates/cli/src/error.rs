use std::fmt;

use serde::Serialize;

/// Failure of a command, carrying a stable machine-readable code.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        CliError {
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn unknown_column(name: &str) -> Self {
        CliError::new(
            "CONFIG_UNKNOWN_COLUMN",
            format!("column `{name}` is not in the input header"),
        )
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new("CONFIG_INVALID", message)
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError::new("IO_ERROR", format!("{}: {err}", path.display()))
    }

    /// `{"error": {"code": ..., "message": ...}}`
    pub fn to_record(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<stagdid::Error> for CliError {
    fn from(e: stagdid::Error) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::new("INPUT_PARSE", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("CONFIG_PARSE", e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
