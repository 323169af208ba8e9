//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("variable count mismatch: {0} vs {1}")]
    VarCountMismatch(usize, usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("split position {pos} outside axis {axis} bounds [{lo}, {hi}]")]
    SplitOutOfBounds {
        axis: usize,
        pos: f64,
        lo: f64,
        hi: f64,
    },

    #[error("relaxation degree {0} too small: {1}")]
    DegreeTooSmall(u32, String),

    #[error("solver returned status {status:?}: {detail}")]
    SolveFailed {
        status: crate::cone::SolveStatus,
        detail: String,
    },

    #[error("eigendecomposition failed: {0}")]
    EigenFailed(String),

    #[error("projection not differentiable: {0}")]
    NotDifferentiable(String),

    #[error("sensitivity matrix rank deficient (estimated rank {rank} of {dim}, residual {residual:.3e})")]
    RankDeficient {
        rank: usize,
        dim: usize,
        residual: f64,
    },

    #[error("structural mismatch between compiled programs: {0}")]
    StructuralMismatch(String),

    #[error("optimization aborted: {0}")]
    OptimizationAborted(String),

    #[error("grid too large: {0} points exceeds cap {1}")]
    GridTooLarge(usize, usize),

    #[error("point outside domain: {0}")]
    OutsideDomain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
