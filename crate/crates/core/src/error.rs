use thiserror::Error;

/// Errors raised by the synthesis, simulation and adversary layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid system model: {0}")]
    InvalidModel(String),
    #[error("gamma = {gamma} is infeasible: gamma^2 I - P is not positive definite (min eig {min_eig:e}; NaN when the fixed-point iteration left the feasible region)")]
    GammaInfeasible { gamma: f64, min_eig: f64 },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("no feasible gamma found below cap {cap}")]
    NotBracketed { cap: f64 },
    #[error("assumption 4 violated: smallest eigenvalue of gamma^2 I - M_(h+1) is {lambda_min:e} >= 0 (gamma = {gamma}, h = {h})")]
    AssumptionFourViolated { gamma: f64, h: usize, lambda_min: f64 },
    #[error("zeta ladder did not reach the tolerance within {q_max} iterations")]
    ZetaNotReached { q_max: usize },
    #[error("policy dimension mismatch: {0}")]
    PolicyDimensionMismatch(String),
    #[error("horizon must be at least 1")]
    HorizonTooSmall,
    #[error("ratio undefined: disturbance energy is zero")]
    DivisionByZero,
    #[error("policy used before initialization")]
    Uninitialized,
    #[error("gain unavailable: {0}")]
    GainUnavailable(String),
    #[error("insufficient history: G needs at least two states since the last transmission")]
    InsufficientHistory,
    #[error("snapshot was taken from a differently parameterized policy")]
    VersionMismatch,
    #[error("policy pair does not support snapshot/restore")]
    SnapshotUnsupported,
    #[error("epsilon set is empty around zero at t = {t} (assumption 5 violated)")]
    EmptySet { t: usize },
    #[error("assumption 5 violated at t = {t}, xi = {xi:?}")]
    AssumptionFiveViolatedAt { t: usize, xi: Vec<f64> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
