use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A probability or sampling computation produced a value that cannot occur.
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("infeasible instance: {0}")]
    Infeasible(String),
    /// Broken harness invariant such as the per-round query budget.
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
