use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {what} = {index}, bound {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("KL divergence undefined at context {x}, action {y}: q = 0 where p > 0")]
    DivergenceUndefined { x: usize, y: usize },
    #[error("degenerate instance: {0}")]
    Degenerate(String),
    #[error("infeasible configuration: {0}")]
    Config(String),
    #[error("iterate {iter} diverged: {detail}")]
    Divergence { iter: usize, detail: String },
    #[error("no convergence after {iters} iterations, last gradient norm {grad_norm:e}")]
    Convergence { iters: usize, grad_norm: f64 },
    #[error("states with zero occupancy mass: {0:?}")]
    ZeroMass(Vec<usize>),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset kind mismatch: expected {0}")]
    DatasetKind(&'static str),
    #[error("missing occupancy offsets; call attach_occupancy_offsets first")]
    MissingOffsets,
    #[error("singular linear system: {0}")]
    Singular(String),
    #[error("fit needs at least {need} positive points, got {got}")]
    Fit { need: usize, got: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
