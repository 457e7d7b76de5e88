//! Error types shared across the crate.

use thiserror::Error;

/// Failures of the hybrid dynamics and stance simulations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimError {
    #[error("singular leg vector (|r| < {0} m)")]
    SingularLeg(f64),
    #[error("no touchdown within {0} s of flight")]
    NoTouchdown(f64),
    #[error("immediate touchdown: foot below ground at the apex by {0} m")]
    ImmediateTouchdown(f64),
    #[error("crashed: CoM reached ground level during stance at t = {0} s")]
    Crashed(f64),
    #[error("stuck in stance: no liftoff within {0} s")]
    StuckInStance(f64),
    #[error("unreachable height difference (negative flight-time radicand {0})")]
    UnreachableHeight(f64),
    #[error("foot never reaches the target ground height")]
    FootNeverLands,
    #[error("degenerate force cone: CoM not above the foot plane")]
    DegenerateCone,
    #[error("stance never engaged the leg below rest length")]
    StanceNeverEngaged,
}

/// Failures of the periodic trajectory search.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SolveError {
    #[error("no periodic solution after {iterations} iterations (residual {residual:.3e})")]
    NoPeriodicSolution { iterations: usize, residual: f64 },
    #[error("periodic search could not start: {0}")]
    BadInitialPoint(SimError),
}

/// Failures of Jacobian estimation and gain synthesis.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GainError {
    #[error("near-singular input Jacobian (cond = {cond:.3e})")]
    NearSingularJu { cond: f64 },
    #[error("perturbed return map failed for {axis} after {attempts} step reductions: {source}")]
    PerturbationFailed {
        axis: &'static str,
        attempts: usize,
        source: SimError,
    },
    #[error("gain magnitude {norm:.3e} exceeds the sanity limit {limit}")]
    GainOutOfRange { norm: f64, limit: f64 },
}

/// Failures of the trajectory selection policies.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum PolicyError {
    /// No candidate survived the named filter stage. Carries the survivor
    /// count after every stage that ran, in order.
    #[error("no feasible trajectory: stage '{stage}' emptied the candidate set ({counts:?})")]
    NoFeasibleTrajectory {
        stage: &'static str,
        counts: Vec<(&'static str, usize)>,
    },
    #[error("input is not a proper rotation about z")]
    NotARotation,
    #[error("back-integration failed: {0}")]
    BackIntegration(SimError),
}

/// Failures while reading or writing library, gain, and log files.
#[derive(Debug, Error)]
pub enum FileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("unsupported format version '{0}'")]
    Version(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
