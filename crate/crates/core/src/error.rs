use thiserror::Error;

pub type Result<T> = std::result::Result<T, SocError>;

#[derive(Error, Debug)]
pub enum SocError {
    #[error("vector has zero norm and cannot be normalized")]
    ZeroNorm,
    #[error("bad dimensions: {0}")]
    BadDims(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("unknown block label `{0}`")]
    UnknownLabel(String),
    #[error("duplicate block label `{0}`")]
    DuplicateLabel(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("coefficients index a different dictionary")]
    WrongDictionary,
    #[error("invalid dictionary: {0}")]
    InvalidDictionary(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("locality dictionary size h={h} is outside 1..={n}")]
    BadH { h: usize, n: usize },
    #[error("degenerate solution: {0}")]
    Degenerate(String),
    #[error("occlusion pattern is identically zero")]
    ZeroPattern,
    #[error("no usable occlusion samples")]
    EmptySamples,
    #[error("unknown occlusion shape `{0}`")]
    UnknownShape(String),
    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
    #[error("solver did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SocError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SocError::ZeroNorm
                | SocError::Degenerate(_)
                | SocError::ZeroPattern
                | SocError::EmptySamples
                | SocError::NoConvergence(_)
        )
    }
}
