use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {0:e} is below the zero-vector guard")]
    ZeroVector(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("quality score {0} outside the open interval (0, 1)")]
    InvalidQuality(f64),
    #[error("forward cache missing: {0}")]
    MissingCache(&'static str),
    #[error("training diverged at epoch {epoch}: {consecutive} consecutive non-finite batch losses")]
    DivergenceDetected { epoch: usize, consecutive: usize },
    #[error("quality table has no entry for sample {0}")]
    IncompleteQualityTable(u64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("total quality mass {0:e} is too small to normalize")]
    ZeroQualityMass(f64),
    #[error("insufficient pairs: {0}")]
    InsufficientPairs(String),
    #[error("no query identity is present in the gallery")]
    NoInGalleryQueries,
    #[error("shape mismatch for tensor {name}: expected {expected}, got {got}")]
    ShapeMismatch { name: String, expected: usize, got: usize },
    #[error("unknown strategy {kind} `{name}`")]
    UnknownStrategy { kind: &'static str, name: String },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { location: location.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
