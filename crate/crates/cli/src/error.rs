use opsurv::SurvError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("{path}:{line}: {msg}")]
    Csv { path: String, line: u64, msg: String },

    #[error(transparent)]
    Surv(#[from] SurvError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{failed} of {total} jobs failed")]
    Jobs { failed: usize, total: usize },
}

impl CliError {
    /// 1 for invalid input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Csv { .. } => 1,
            CliError::Surv(e) if matches!(e, SurvError::Config(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
