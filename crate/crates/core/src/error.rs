use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A label id or name that does not belong to the scheme in use.
    #[error("label scheme mismatch: {0}")]
    SchemeMismatch(String),

    #[error("illegal label sequence: {0}")]
    IllegalSequence(String),

    #[error("overlapping spans: {0}")]
    OverlappingSpans(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("sequence too long: length {len} exceeds limit {max}")]
    TooLong { len: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{source_name}:{line}: {message}")]
    Format {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("model file: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(source_name: &str, line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            source_name: source_name.to_string(),
            line,
            message: message.into(),
        }
    }
}
