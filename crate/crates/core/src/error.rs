use thiserror::Error;

/// Errors raised by the laboratory's value constructors and operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("enumeration bound exceeded: {0}")]
    BoundExceeded(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("not in general position: {0}")]
    GeneralPosition(String),

    #[error("inconsistent labels: {0}")]
    InconsistentLabels(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

impl Error {
    /// Prefixes the message with `ctx`, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Error {
        match self {
            Error::Shape(m) => Error::Shape(format!("{ctx}: {m}")),
            Error::InvalidParameter(m) => Error::InvalidParameter(format!("{ctx}: {m}")),
            Error::NonFinite(m) => Error::NonFinite(format!("{ctx}: {m}")),
            Error::BoundExceeded(m) => Error::BoundExceeded(format!("{ctx}: {m}")),
            Error::InvalidPermutation(m) => Error::InvalidPermutation(format!("{ctx}: {m}")),
            Error::Parse(m) => Error::Parse(format!("{ctx}: {m}")),
            Error::GeneralPosition(m) => Error::GeneralPosition(format!("{ctx}: {m}")),
            Error::InconsistentLabels(m) => Error::InconsistentLabels(format!("{ctx}: {m}")),
        }
    }
}
