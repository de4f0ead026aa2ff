use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the failure modes of
/// the public operations; numeric kernels never panic on bad user input.
#[derive(Debug, Error)]
pub enum NgcError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("rank out of range: {0}")]
    RankError(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("metric has no trainable parameters")]
    NotTrainable,
    #[error("not positive-definite: {0}")]
    NotPositiveDefinite(String),
    #[error("policy mismatch: {0}")]
    PolicyMismatch(String),
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("unknown block: {0}")]
    UnknownBlock(String),
    #[error("budget below one rank: {0}")]
    BudgetTooSmall(String),
    #[error("invalid merge: {0}")]
    InvalidMerge(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate dynamics: {0}")]
    DegenerateDynamics(String),
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("invalid token: {0}")]
    InvalidToken(String),
    #[error("flow step too large: {0}")]
    StepTooLarge(String),
    #[error("system not contractive: rho = {0}")]
    NotContractive(f64),
    #[error("bad tensor file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<NgcError>,
    },
}

impl NgcError {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> NgcError {
        NgcError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, NgcError>;
