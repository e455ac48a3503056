use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed velodyne frame{}: {reason}", frame.map(|f| format!(" {f}")).unwrap_or_default())]
    MalformedFrame { frame: Option<usize>, reason: String },
    #[error("malformed pose on line {line}: {reason}")]
    MalformedPose { line: usize, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no pose for frame {0}")]
    MissingPose(usize),
    #[error("evaluation needs at least one ground-truth positive")]
    NoPositives,
    #[error("ROC needs at least one positive and one negative decision")]
    DegenerateLabels,
    #[error("non-finite value estimate at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: usize },
    #[error("bad {record} file: {reason}")]
    Format { record: &'static str, reason: String },
    #[error("format version {found} is not supported (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Autodiff(#[from] safl_autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
