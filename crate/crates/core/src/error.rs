use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("inconsistent input: {0}")]
    Consistency(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate channel: {0}")]
    DegenerateChannel(String),
    #[error("invalid regime: {0}")]
    InvalidRegime(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
