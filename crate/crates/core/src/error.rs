use thiserror::Error;

/// Errors produced by the matching library.
#[derive(Debug, Error)]
pub enum SemError {
    /// The query pixel maps onto the epipole (or translation is zero), so no line exists.
    #[error("degenerate epipolar line: pixel maps onto the epipole")]
    DegenerateLine,
    #[error("need at least {required} qualifying matches, got {found}")]
    InsufficientMatches { found: usize, required: usize },
    /// Every decomposition of the essential matrix failed the cheirality test.
    #[error("degenerate configuration: no pose candidate passes the cheirality test")]
    DegenerateConfiguration,
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("scale mismatch: {0}")]
    ScaleMismatch(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("attention row {0} has no unmasked key")]
    EmptyRow(usize),
    #[error("ground-truth set is empty")]
    EmptyGroundTruth,
    #[error("infeasible scene spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SemError> = std::result::Result<T, E>;
