use std::path::PathBuf;

use llmpred::data::DataError;
use llmpred::decompose::DecomposeError;
use llmpred::pipeline::PipelineError;
use llmpred::report::ReportError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("invalid `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{0}")]
    Data(DataError),
    #[error("{0}")]
    Decompose(#[from] DecomposeError),
    #[error("{0}")]
    Budget(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    /// Stable identifier printed as `error[CODE]`.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Usage(_) => "E_USAGE",
            Self::MissingFile(_) => "E_MISSING_FILE",
            Self::Config { .. } => "E_CONFIG",
            Self::Data(_) => "E_DATA",
            Self::Decompose(_) => "E_DECOMPOSE",
            Self::Budget(_) => "E_BUDGET",
            Self::Backend(_) => "E_BACKEND",
            Self::Io(_) => "E_IO",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingFile(_) | Self::Usage(_) => 2,
            Self::Config { .. } => 3,
            Self::Data(_) => 4,
            Self::Decompose(_) => 5,
            Self::Budget(_) => 6,
            Self::Backend(_) => 7,
            Self::Io(_) => 8,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::MissingFile(p) => Self::MissingFile(p),
            other => Self::Data(other),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config { field, message } => Self::Config { field, message },
            PipelineError::Data(d) => d.into(),
            b @ PipelineError::BudgetExceeded { .. } => Self::Budget(b.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        Self::Io(e.to_string())
    }
}
