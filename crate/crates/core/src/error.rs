use thiserror::Error;

/// Errors raised by the fusion library.
#[derive(Debug, Error)]
pub enum FusionError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("region is unbounded in coordinate {0}")]
    UnboundedRegion(usize),

    #[error("sample bank is empty")]
    EmptyBank,

    #[error("weight collapse at iteration {iteration}: all particle weights are zero")]
    WeightCollapse { iteration: usize },

    #[error("layer index exceeded cap {cap} (segment duration {duration:e}, granularity {granularity})")]
    LayerCapExceeded {
        cap: usize,
        duration: f64,
        granularity: f64,
    },

    #[error("conditional bridge rejection stalled after {proposals} proposals (layer index {layer_index})")]
    RejectionStall { proposals: usize, layer_index: usize },

    #[error("Poisson count {kappa} exceeds cap {cap}; the partition increment is far too large")]
    KappaCapExceeded { kappa: u64, cap: u64 },

    #[error("rejection acceptance rate {rate:e} after {proposals} proposals; T is too small relative to the spread around the anchor")]
    LowAcceptance { rate: f64, proposals: usize },

    #[error("sub-posterior {0} has no known global lower bound on phi")]
    UnknownPhiLowerBound(usize),

    #[error("matrix is singular: {0}")]
    SingularMatrix(String),

    #[error("estimator configuration requires {0}")]
    UnsupportedModel(&'static str),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FusionError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(FusionError::DimensionMismatch { expected, got });
    }
    Ok(())
}
