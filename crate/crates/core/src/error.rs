use thiserror::Error;

/// Errors raised anywhere in the distillation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmdError {
    /// Shapes, widths or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside the domain where the quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// A NaN or infinity showed up where a finite value is required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed text or binary input.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EmdError {
    fn from(err: std::io::Error) -> Self {
        EmdError::Io(err.to_string())
    }
}

pub type Result<T, E = EmdError> = std::result::Result<T, E>;

pub(crate) fn dim_check(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(EmdError::Config(format!(
            "{what}: expected length {expected}, got {got}"
        )))
    }
}
