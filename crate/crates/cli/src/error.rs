use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or flag combinations.
    #[error("{0}")]
    Usage(String),

    /// The command ran but its check failed.
    #[error("{0}")]
    Failed(String),

    #[error(transparent)]
    Core(#[from] capsroute::Error),
}

impl CliError {
    /// 0 success, 1 runtime or numeric failure, 2 usage or config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
            CliError::Core(e) => match e {
                capsroute::Error::Config(_) | capsroute::Error::CheckpointShape { .. } => 2,
                _ => 1,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
