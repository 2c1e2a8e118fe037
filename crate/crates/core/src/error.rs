use thiserror::Error;

/// Errors raised by the simulation, filtering and verification layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("data integrity violation: {0}")]
    DataIntegrity(String),

    #[error("numerical failure at step {step}: {quantity}")]
    NumericalFailure { step: usize, quantity: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status: 2 for configuration and input errors, 3 for
    /// numerical failures and integrity violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::DimensionMismatch { .. }
            | Error::Io(_) => 2,
            Error::NumericalFailure { .. } | Error::DataIntegrity(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
