use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint manifest error: {0}")]
    Manifest(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for broken contracts (bad input,
    /// config or checkpoint), 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) | Error::Manifest(_) => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}

impl From<featsplat::Error> for Error {
    fn from(e: featsplat::Error) -> Self {
        match e {
            featsplat::Error::Contract(m) => Error::Contract(m),
            featsplat::Error::Config(m) => Error::Config(m),
            featsplat::Error::Numeric(m) => Error::Numeric(m),
            featsplat::Error::Io(e) => Error::Io {
                path: String::new(),
                source: e,
            },
        }
    }
}

impl From<diffcore::Error> for Error {
    fn from(e: diffcore::Error) -> Self {
        featsplat::Error::from(e).into()
    }
}

pub type Result<T> = std::result::Result<T, Error>;
