use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("missing prediction for image {image_id} anchor {anchor_index}")]
    Coverage { image_id: u64, anchor_index: usize },

    #[error("role error: {0}")]
    Role(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used as the machine-parsable prefix on the CLI's
    /// diagnostic stream and as the basis for FFI error codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad-magic",
            Error::VersionMismatch { .. } => "version",
            Error::Truncated(_) => "truncated",
            Error::Format(_) => "format",
            Error::Dimension { .. } => "dimension",
            Error::Degenerate(_) => "degenerate",
            Error::Index(_) => "index",
            Error::Config(_) => "config",
            Error::Consistency(_) => "consistency",
            Error::Coverage { .. } => "coverage",
            Error::Role(_) => "role",
            Error::Parse { .. } => "parse",
            Error::EmptyDataset(_) => "empty-dataset",
            Error::Json { .. } => "json",
        }
    }
}
