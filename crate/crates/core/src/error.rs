//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("input coordinate {coord} out of range for dimension {dim}")]
    CoordOutOfRange { coord: usize, dim: usize },

    #[error("{what} must not be empty")]
    EmptyInput { what: &'static str },

    #[error("point lies outside the open support box in dimension {dim} (value {value})")]
    OutsideSupport { dim: usize, value: f64 },

    #[error("non-finite input: {what}")]
    NonFinite { what: &'static str },

    #[error(
        "sample acceptance starvation{}: accepted {accepted}/{requested} after {attempts} draws \
         (acceptance rate {rate:.4})",
        stage.map(|s| format!(" at stage {s}")).unwrap_or_default()
    )]
    AcceptanceStarvation {
        requested: usize,
        accepted: usize,
        attempts: usize,
        rate: f64,
        stage: Option<usize>,
    },

    #[error("proposal density vanished at a batch point (broken importance-sampling support)")]
    BrokenSupport,

    #[error("stage tag violation: new points carry tag {new_tag} not greater than existing {max_existing}")]
    StageTagViolation { new_tag: u32, max_existing: u32 },

    #[error("Halton generator supports at most {max} dimensions, requested {requested}")]
    HaltonDimension { requested: usize, max: usize },

    #[error("selection count {requested} exceeds candidate pool size {available}")]
    SelectionTooLarge { requested: usize, available: usize },

    #[error("relative error undefined: reference values have zero norm")]
    ZeroReferenceNorm,

    #[error("step size underflow in ODE integrator at x = {x:.6e}")]
    StepSizeUnderflow { x: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    CheckpointKind { expected: String, found: String },

    #[error("node {node} is not on this tape (length {len})")]
    NodeOutOfRange { node: usize, len: usize },

    #[error("tangent of node {node} is not a valid input derivative (already extracted once)")]
    InvalidTangent { node: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach an adaptivity-stage index to starvation errors surfacing from
    /// deep inside the refinement loop.
    pub(crate) fn with_stage(self, stage_idx: usize) -> Self {
        match self {
            Error::AcceptanceStarvation {
                requested,
                accepted,
                attempts,
                rate,
                ..
            } => Error::AcceptanceStarvation {
                requested,
                accepted,
                attempts,
                rate,
                stage: Some(stage_idx),
            },
            other => other,
        }
    }
}
