use thiserror::Error;

/// Errors raised by the lattice, model, fitting and solver layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("singular cell matrix (det = {0:e})")]
    SingularCell(f64),
    #[error("no lattice site at {0:?}")]
    NotASite(Vec<f64>),
    #[error("atom collision: distance {0:e} below 1e-8")]
    Collision(f64),
    #[error("deformation not admissible")]
    Inadmissible,
    #[error("collapsed deformation gradient (det F = {0:e})")]
    Collapse(f64),
    #[error("coefficient vector of length {got} does not match basis of size {expected}")]
    Alignment { expected: usize, got: usize },
    #[error("unsupported derivative order {order} for {kind}")]
    UnsupportedOrder { kind: &'static str, order: usize },
    #[error("empty observation set")]
    EmptyObservations,
    #[error("all pivots truncated (largest pivot {0:e})")]
    AllPivotsTruncated(f64),
    #[error("radius ordering violated: {0}")]
    RadiusOrdering(String),
    #[error("evaluation on the branch cut or at the dislocation core: {0:?}")]
    OnBranchCut(Vec<f64>),
    #[error("fixed point did not converge after {0} iterations")]
    FixedPoint(usize),
    #[error("non-elliptic elasticity tensor: {0}")]
    NonElliptic(String),
    #[error("eigensolver failure: {0}")]
    Eigen(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
