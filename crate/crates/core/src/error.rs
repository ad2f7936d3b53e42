use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot split blocks of size {0}")]
    CannotSplit(usize),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("no candidate actions to select from")]
    NoCandidates,

    /// The query budget is spent. `used` is the number of queries answered so far.
    #[error("query budget exhausted after {used} queries")]
    BudgetExhausted { used: usize },

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("oracle protocol error: {0}")]
    Protocol(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
