use std::io;

/// Errors surfaced by the library. The CLI maps these onto stable exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A static description (spec, config, shapes) is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// The caller asked for something the current state cannot provide.
    #[error("usage error: {0}")]
    Usage(String),
    /// Input data (annotations, images) is malformed.
    #[error("data error: {0}")]
    Data(String),
    /// A non-finite value appeared during optimization.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &str, detail: impl std::fmt::Display) -> Self {
        Error::Config(format!("{op}: shape mismatch ({detail})"))
    }
}
