use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    /// A malformed input row. `line` is 1-based and counts the header.
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },

    #[error("{0}")]
    Validation(String),

    #[error("verification conflict: {0}")]
    Conflict(String),

    #[error("category hierarchy contains a cycle through {0}")]
    Cycle(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: u64, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line()).unwrap_or(0);
        match err.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            kind => Error::parse(line, format!("{kind:?}")),
        }
    }
}
