use std::path::PathBuf;

/// Errors raised by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or input parameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// Tensor or image dimensions incompatible with a model or operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// A caller violated an operation's preconditions.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A loss became non-finite during optimisation.
    #[error("divergence at epoch {epoch}, step {step} ({phase}): {detail}")]
    Divergence { epoch: usize, step: usize, phase: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    /// True for errors caused by the user's configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Shape(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
