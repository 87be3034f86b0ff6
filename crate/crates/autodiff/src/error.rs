use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{layer}: shape mismatch: {detail}")]
    Shape { layer: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("non-finite value in parameter `{0}`")]
    NonFinite(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("bad magic bytes")]
    Magic,
    #[error("truncated stream: {0}")]
    Truncated(&'static str),
    #[error("malformed stream: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(layer: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape {
        layer,
        detail: detail.into(),
    })
}
