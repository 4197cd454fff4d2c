use thiserror::Error;
use trackerf_tensor::TensorError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("pixel ({0}, {1}) is outside the image")]
    PixelOutOfBounds(f64, f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid sampling bounds near={near} far={far}")]
    InvalidBounds { near: f64, far: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        CoreError::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by numeric blow-ups rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            CoreError::NonFiniteGradient(_)
                | CoreError::NonFinite(_)
                | CoreError::Tensor(TensorError::NonFinite(_))
        )
    }
}
