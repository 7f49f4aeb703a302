use thiserror::Error;

pub type Result<T, E = ScotomaError> = std::result::Result<T, E>;

/// Error type shared by every module of the crate.
///
/// The variants fall into three families that callers (the CLI in particular)
/// map onto stable exit codes: configuration, data validation and numerics.
#[derive(Debug, Error)]
pub enum ScotomaError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("insufficient pairs: {0}")]
    InsufficientPairs(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ScotomaError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ScotomaError::Config(_) => ErrorKind::Config,
            ScotomaError::Data(_)
            | ScotomaError::DimensionMismatch { .. }
            | ScotomaError::Io(_)
            | ScotomaError::Csv(_) => ErrorKind::Data,
            ScotomaError::Numerical(_) | ScotomaError::InsufficientPairs(_) => {
                ErrorKind::Numerical
            }
        }
    }
}

pub(crate) fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(ScotomaError::DimensionMismatch { expected, got });
    }
    Ok(())
}
