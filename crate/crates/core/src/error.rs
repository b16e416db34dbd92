use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed grid document: {0}")]
    Malformed(String),
    #[error("duplicate line between buses {0} and {1}")]
    DuplicateLine(i64, i64),
    #[error("disconnected graph ({components} components)")]
    Disconnected { components: usize },
    #[error("non-positive parameter: {0}")]
    NonPositive(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("LMI infeasible within iteration budget (best residual {best_residual:e})")]
    Infeasible { best_residual: f64 },
    #[error("LMI slack is indefinite ({max_eigenvalue:e}); factorization unavailable")]
    FactorizationUnavailable { max_eigenvalue: f64 },
    #[error("Lyapunov function unbounded below on facet (edge {edge}, sign {sign})")]
    UnboundedBelow { edge: usize, sign: i8 },
    #[error("no feasible start on facet (edge {edge}, sign {sign})")]
    NoFeasibleStart { edge: usize, sign: i8 },
    #[error("grid has {edges} lines, UEP enumeration is limited to {limit}")]
    ScaleGuard { edges: usize, limit: usize },
    #[error("integration step underflow at t = {time}")]
    StepUnderflow { time: f64 },
    #[error("unknown bus id {0}")]
    UnknownBus(i64),
    #[error("artifact was produced for grid {expected}, got {actual}")]
    GridMismatch { expected: String, actual: String },
    #[error("equilibrium is not secure: max |δ*| = {max_difference} is not below π/2")]
    Insecure { max_difference: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
