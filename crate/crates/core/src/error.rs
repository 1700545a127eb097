use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OdgError>;

#[derive(Debug, Error)]
pub enum OdgError {
    /// Bad or missing configuration, or a precondition the caller violated.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("open-sample generator unavailable: {0}")]
    OpenGenUnavailable(String),

    #[error("malformed generator payload: {0}")]
    Payload(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl OdgError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// True for errors caused by user input rather than a runtime failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::InvalidArgument(_) | Self::UnknownClass(_) | Self::Data(_)
        )
    }
}
