use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("corrupt bitstream: {0}")]
    Corrupt(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 = I/O, 3 = corruption/model
    /// mismatch, 4 = numeric failure, 1 = everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::MalformedFile(_) => 2,
            Error::Corrupt(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
