use thiserror::Error;

/// Failure modes shared by every op in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller broke an op's precondition (shapes, ranks, scalar-ness).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration value is unusable (e.g. non-power-of-two FFT axis).
    #[error("configuration error: {0}")]
    Config(String),
    /// A computation produced or detected a non-finite or inconsistent value.
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
