use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("division by zero in {0}")]
    DivisionByZero(&'static str),
    #[error("{op} of negative input {value}")]
    NegativeInput { op: &'static str, value: f64 },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on a tensor that is not recorded on a tape")]
    EmptyTape,
    #[error("tensor belongs to a tape generation that was already consumed")]
    StaleTape,
    #[error("operands are recorded on different tapes")]
    TapeMismatch,
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("{0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

impl From<std::io::Error> for TensorError {
    fn from(e: std::io::Error) -> Self {
        TensorError::Io(e.to_string())
    }
}
