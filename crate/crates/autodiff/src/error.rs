use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {layer}: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("no forward trace recorded for node {0}")]
    NoTrace(usize),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn shape_err(layer: &str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        layer: layer.to_string(),
        detail: detail.into(),
    }
}
