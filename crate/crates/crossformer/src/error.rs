use std::path::PathBuf;

use serde::Serialize;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Core(#[from] crossformer_core::Error),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Format(_) => "format",
            CliError::Core(e) => e.kind(),
            CliError::GradCheck(_) => "gradcheck",
        }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::GradCheck(_) => 1,
            _ => 2,
        }
    }

    /// The single-line JSON written to stderr on failure.
    pub fn record(&self) -> ErrorRecord {
        let (file, line) = match self {
            CliError::Io { path, .. } => (Some(path.display().to_string()), None),
            CliError::Parse { path, line, .. } => (Some(path.display().to_string()), Some(*line)),
            _ => (None, None),
        };
        let record = match self {
            CliError::Core(crossformer_core::Error::Validation { record, .. }) => Some(record.clone()),
            _ => None,
        };
        ErrorRecord { error: self.kind(), message: self.to_string(), file, line, record }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<String>,
}
