use scanmask_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Autodiff(AutodiffError),
}

impl From<AutodiffError> for Error {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::Dimension(m) => Error::Dimension(m),
            AutodiffError::Validation(m) => Error::Validation(m),
            AutodiffError::Io(e) => Error::Io(e),
            other => Error::Autodiff(other),
        }
    }
}

impl Error {
    /// Process exit code for command-line use.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            Error::Numeric(_) => 4,
            Error::Autodiff(AutodiffError::Format(_)) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
