use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid camera rig: {0}")]
    InvalidRig(String),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid augmentation: {0}")]
    InvalidAugmentation(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("feature maps do not match rig: {0}")]
    FeatureMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("ground truth box at the ego origin has no line of sight")]
    DegenerateLineOfSight,
    #[error("scene rejected: {0}")]
    SceneRejected(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
