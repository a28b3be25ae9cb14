use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Container and text-format decoding failures. Each variant is a distinct
/// diagnostic so callers (and the CLI) can report precisely what was wrong.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("header truncated: need {need} bytes, have {have}")]
    TruncatedHeader { need: usize, have: usize },
    #[error("dimensions {dims:?} overflow the addressable payload size")]
    DimOverflow { dims: Vec<u64> },
    #[error("zero-sized dimension in {dims:?}")]
    ZeroDim { dims: Vec<u64> },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("payload truncated: need {need} bytes, have {have}")]
    TruncatedPayload { need: usize, have: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("non-binary mask value {value} at element {index}")]
    NonBinaryMask { index: usize, value: f64 },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("format error in {path}: {source}", path = .path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<memory>".into()))]
    Format {
        path: Option<PathBuf>,
        #[source]
        source: FormatError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<FormatError> for Error {
    fn from(source: FormatError) -> Self {
        Error::Format { path: None, source }
    }
}

pub(crate) trait WithPath<T> {
    fn at_path(self, path: &std::path::Path) -> Result<T>;
}

impl<T> WithPath<T> for Result<T> {
    fn at_path(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| match e {
            Error::Format { path: None, source } => Error::Format { path: Some(path.to_path_buf()), source },
            other => other,
        })
    }
}
