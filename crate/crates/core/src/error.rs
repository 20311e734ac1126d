use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: missing key `{key}`")]
    MissingKey { line: usize, key: &'static str },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("duplicate class id `{0}`")]
    DuplicateClass(String),

    #[error("parent cycle: {}", .0.join(" -> "))]
    ParentCycle(Vec<String>),

    #[error("bad magic bytes {0:?}, expected \"ZSF1\"")]
    BadMagic([u8; 4]),

    #[error("truncated {section}: expected {expected} bytes, found {found}")]
    Truncated {
        section: &'static str,
        expected: u64,
        found: u64,
    },

    #[error("label count {labels} does not match row count {rows}")]
    LabelCount { labels: usize, rows: usize },

    #[error("invalid label block: {0}")]
    InvalidLabels(String),

    #[error("{0} trailing bytes after labels block")]
    TrailingBytes(u64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("duplicate token `{0}`")]
    DuplicateToken(String),

    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("token `{0}` has no embedding and is required as fallback")]
    MissingFallback(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("method {method} requires parameter `{param}`")]
    MissingParam {
        method: &'static str,
        param: &'static str,
    },

    #[error("combination of prototypes has zero norm")]
    ZeroNorm,

    #[error("label `{0}` has no prototype")]
    UnmatchedLabel(String),

    #[error("linear system is singular; use lambda > 0")]
    Singular,

    #[error("non-finite gradient at epoch {0}")]
    NonFiniteGradient(usize),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn in_file(path: impl Into<PathBuf>, source: Error) -> Self {
        Error::InFile {
            path: path.into(),
            source: Box::new(source),
        }
    }

    /// True when the error comes from malformed or missing inputs rather than
    /// from the numerical computation itself.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Singular | Error::NonFiniteGradient(_) | Error::ZeroNorm => false,
            Error::InFile { source, .. } => source.is_input_error(),
            _ => true,
        }
    }
}
