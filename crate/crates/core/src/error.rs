use thiserror::Error;

#[derive(Debug, Error)]
pub enum OryxError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("resolution {height}x{width} is smaller than patch size {patch}")]
    TooSmall {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("packed batch integrity: {0}")]
    Integrity(String),

    #[error("unsupported downsample ratio {0} (expected 1, 2 or 4)")]
    UnsupportedRatio(usize),

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed tensor file; `offset` is the byte position of the first violation.
    #[error("malformed tensor file at byte {offset}: {reason}")]
    TensorFormat { offset: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl OryxError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        OryxError::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        OryxError::Shape(msg.into())
    }

    /// True for errors caused by bad arguments or data rather than numerics.
    pub fn is_validation(&self) -> bool {
        !matches!(self, OryxError::Numerical(_) | OryxError::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, OryxError>;
