use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("size error: {what} requires {required} but the limit is {limit}")]
    Size {
        what: &'static str,
        required: usize,
        limit: usize,
    },

    #[error("fit error: {0}")]
    Fit(#[from] crate::stats::fit::FitError),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("classification error: {0}")]
    Classification(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
