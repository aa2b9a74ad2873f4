use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("graph has already been back-propagated; record a new graph")]
    AlreadyBackpropagated,
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("malformed KSF1 container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T, AutodiffError> {
    Err(AutodiffError::Dimension(msg.into()))
}
