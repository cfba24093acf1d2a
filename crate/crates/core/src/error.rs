use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("i/o error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("encoding error at position {position}: unexpected character {found:?}")]
    Encoding { position: usize, found: char },

    #[error("decoding error at position {position}: invalid token id {id}")]
    Decoding { position: usize, id: u8 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite loss at step {step} (batch {batch_id})")]
    NonFinite { step: usize, batch_id: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind, used for single-line CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) | Error::IoAt { .. } => "io",
            Error::Format(_) => "format",
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Encoding { .. } => "encoding",
            Error::Decoding { .. } => "decoding",
            Error::Degenerate(_) => "degenerate",
            Error::NonFinite { .. } => "non_finite",
            Error::Usage(_) => "usage",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt { path: path.into(), source }
    }
}

pub(crate) fn shape_mismatch(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}
