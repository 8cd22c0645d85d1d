use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmvError {
    #[error("pressure levels must be strictly decreasing (level {index}: {upper} <= {lower})")]
    NonMonotoneLevels { index: usize, upper: f64, lower: f64 },
    #[error("at least {min} pressure levels are required, got {got}")]
    TooFewLevels { min: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("grid dimension {0} is not a power of two")]
    NonPowerOfTwo(usize),
    #[error("wavelet depth {depth} exceeds the maximum {max} for this grid")]
    BadDepth { depth: usize, max: usize },
    #[error("soft threshold level must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("penalty parameter rho must be positive, got {0}")]
    NonPositiveRho(f64),
    #[error("invalid schedule stage {stage} (schedule has {stages} stages)")]
    BadStage { stage: usize, stages: usize },
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("objective is not finite")]
    NonFiniteObjective,
    #[error("line search failed after {iterations} iterations")]
    LineSearchFailure { iterations: usize },
    #[error("ADMM diverged at outer iteration {iteration}: objective {value} exceeds {limit}")]
    DivergenceDetected { iteration: usize, value: f64, limit: f64 },
    #[error("split ADMM requires an even number of layers, got {0}")]
    OddLayerCount(usize),
    #[error("variant {variant} is incompatible with {detail}")]
    IncompatibleVariant { variant: String, detail: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("layer {layer} is not fully covered by the band pressures")]
    CoverageGap { layer: usize },
    #[error("metric denominator is zero at index {index}")]
    ZeroDenominator { index: usize },
    #[error("io error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for AmvError {
    fn from(err: std::io::Error) -> Self {
        AmvError::Io(err.to_string())
    }
}

impl From<serde_json::Error> for AmvError {
    fn from(err: serde_json::Error) -> Self {
        AmvError::Format(err.to_string())
    }
}

impl AmvError {
    /// Whether the error comes from the numerical solve rather than from the input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            AmvError::NonFiniteObjective | AmvError::LineSearchFailure { .. } | AmvError::DivergenceDetected { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, AmvError>;
