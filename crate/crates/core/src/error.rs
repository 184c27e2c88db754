use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("duplicate id {0}")]
    DuplicateId(u64),

    #[error("non-finite value in record {id}")]
    NonFinite { id: u64 },

    #[error("bad magic bytes: not a feature store file")]
    BadMagic,

    #[error("unsupported store version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: header requires {needed} bytes, file has {actual}")]
    Truncated { needed: u64, actual: u64 },

    #[error("corrupt store: {0}")]
    Corrupt(String),

    #[error("degenerate bandwidth: no nonzero pairwise distance")]
    DegenerateBandwidth,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing aux channel '{0}'")]
    MissingAux(String),

    #[error("unknown id {0}")]
    UnknownId(u64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed input at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn empty(msg: impl Into<String>) -> Self {
        Error::Empty(msg.into())
    }
}
