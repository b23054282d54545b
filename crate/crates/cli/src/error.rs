use emd_core::EmdError;

/// Failure of a subcommand, classified by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, unreadable inputs, malformed files.
    #[error("{0}")]
    Validation(String),
    /// Training diverged or a verification suite failed.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl From<EmdError> for CliError {
    fn from(e: EmdError) -> Self {
        match e {
            EmdError::Numerical(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
