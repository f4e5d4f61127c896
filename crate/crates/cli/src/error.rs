use thiserror::Error;

/// Command failure with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, config or input format (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Anything that went wrong while doing the work (exit 1).
    #[error(transparent)]
    Runtime(#[from] subboost::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::Failed(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}
