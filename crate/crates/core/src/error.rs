use thiserror::Error;

use crate::tensor_io::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes surfaced by the toolkit. The CLI maps each variant to a
/// distinct exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("bundle format error: {0}")]
    Format(#[from] FormatError),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn analysis(msg: impl Into<String>) -> Self {
        Error::Analysis(msg.into())
    }
}
