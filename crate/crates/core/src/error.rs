use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<diffcore::Error> for Error {
    fn from(e: diffcore::Error) -> Self {
        match e {
            diffcore::Error::Contract(m) => Error::Contract(m),
            diffcore::Error::Config(m) => Error::Config(m),
            diffcore::Error::Numeric(m) => Error::Numeric(m),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
