//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid gaussian: {0}")]
    InvalidGaussian(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid feature map: {0}")]
    InvalidFeatureMap(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-positive depth: {0}")]
    NonPositiveDepth(f64),

    #[error("invalid scene spec: {0}")]
    InvalidSceneSpec(String),

    #[error("invalid view spec: {0}")]
    InvalidViewSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("source pixel record out of bounds: view {view}, pixel ({y}, {x})")]
    SourceOutOfBounds { view: usize, y: usize, x: usize },

    #[error("non-finite gradient in segment '{segment}'")]
    NonFiniteGradient { segment: String },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("singular normal equations: {0}")]
    SingularSystem(String),

    #[error("invalid probe input: {0}")]
    InvalidProbeInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("file format error: {0}")]
    Format(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
