use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid contract: {0}")]
    InvalidContract(String),

    #[error("infeasible contract: {0}")]
    Infeasible(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("constraint pair ({lo}, {hi}) lies outside the admissible triangle of size {n}")]
    OutsideTriangle { lo: f64, hi: f64, n: usize },

    #[error("global constraints ({lo}, {hi}) are not integer valued")]
    NonInteger { lo: f64, hi: f64 },

    #[error("premium surface has no value at vertex ({0}, {1})")]
    SurfaceIncomplete(usize, usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty sample set")]
    EmptySamples,

    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("instance too large for exhaustive enumeration: {0}")]
    InstanceTooLarge(String),

    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("invalid quantization tree: {0}")]
    InvalidTree(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
