//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("leaf cube: cannot subdivide at level {level} (grid depth {depth})")]
    LeafCube { level: u32, depth: u32 },

    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },

    #[error("exponent out of range: {context}")]
    ExponentRange { context: String },

    #[error("depth mismatch: expected {expected}, got {got}")]
    DepthMismatch { expected: u32, got: u32 },

    #[error("support violation: {context}")]
    SupportViolation { context: String },

    #[error("invalid truncation radius {eps}")]
    InvalidTruncation { eps: f64 },

    #[error("invalid suppression profile: {context}")]
    InvalidProfile { context: String },

    #[error("degenerate accretive system: {context}")]
    DegenerateSystem { context: String },

    #[error("degenerate denominator at cube {cube}: average {value}")]
    DegenerateDenominator { cube: String, value: f64 },

    #[error("sparseness violated at cube {cube}: covered fraction {fraction}")]
    SparsenessViolated { cube: String, fraction: f64 },

    #[error("no sparseness margin at cube {cube}: stopping cubes cover it entirely")]
    NoSparsenessMargin { cube: String },

    #[error("config error: {context}")]
    Config { context: String },

    #[error("missing input: {context}")]
    MissingInput { context: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config { context: msg.into() }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }

    /// Process exit code: 2 for configuration problems, 3 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::ExponentRange { .. } => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
