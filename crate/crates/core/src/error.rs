use thiserror::Error;

/// Errors raised by the library. Each variant maps onto one of the
/// coarse categories reported by the command-line tool.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: String, message: String },

    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Numeric(String),

    #[error("{0}")]
    Config(String),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } | Error::Csv { .. } => "io",
            Error::Validation(_) => "validation",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
