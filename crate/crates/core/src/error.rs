use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid architecture string {string:?}: {reason}")]
    BadArchString { string: String, reason: String },

    #[error("invalid proxy config: {0}")]
    BadConfig(String),

    #[error("malformed batch file at byte offset {offset}: {reason}")]
    MalformedBatchFile { offset: u64, reason: String },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("architecture {0:?} not present in benchmark")]
    UnknownArch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero fan in kernel initializer")]
    ZeroFan,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
