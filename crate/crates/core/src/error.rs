use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{what} = {value} lies outside [{lo}, {hi}]")]
    OutOfDomain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("index ({i}, {j}) outside 1..={max}")]
    IndexOutOfRange { i: usize, j: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-uniform grid: spacing {found} differs from {expected}")]
    NonUniformGrid { expected: f64, found: f64 },

    #[error("characteristic feet cross between dual points {index} and {next} ({left} > {right})")]
    CrossingCharacteristics {
        index: usize,
        next: usize,
        left: f64,
        right: f64,
    },

    #[error("singular linear system (pivot ratio {pivot_ratio:e}); {hint}")]
    SingularSystem { pivot_ratio: f64, hint: String },

    #[error("iterative solve did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("negative density {value:e} at node {node} exceeds clamp tolerance")]
    NegativeDensity { node: usize, value: f64 },

    #[error("Armijo line search failed after {attempts} backtracks")]
    LineSearch { attempts: usize },

    #[error("forward solve failed at drift pair ({}, {}): {source}", alpha[0], alpha[1])]
    ForwardSolve {
        alpha: [f64; 2],
        #[source]
        source: Box<Error>,
    },

    #[error("line {line}: {message}")]
    Data { line: usize, message: String },

    #[error("no observations")]
    NoObservations,

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
