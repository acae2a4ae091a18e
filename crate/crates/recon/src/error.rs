//! Crate-wide error type and exit-code mapping.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension / shape violations; the message names the offending axis.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dtype error: {0}")]
    Dtype(String),

    /// Invalid configuration or flag combination.
    #[error("config error: {0}")]
    Config(String),

    /// Missing, unreadable, or malformed data files.
    #[error("data error: {0}")]
    Data(String),

    /// NaN propagation, divergence, or other numeric failure.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("missing gradient for parameter '{0}'")]
    MissingGrad(String),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Dtype(_) | Error::MissingGrad(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(e.to_string())
    }
}
