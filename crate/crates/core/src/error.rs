//! Error type shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid belief: {0}")]
    InvalidBelief(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("every alternative evaluates to -inf (degenerate disturbance draw)")]
    NonFinite,
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("degenerate support: {0}")]
    DegenerateSupport(String),
    #[error("prior lies outside the convex hull of the points (residual {residual:e})")]
    Infeasible { residual: f64 },
    #[error("points are affinely dependent (rank {rank} < {points})")]
    RankDeficient { rank: usize, points: usize },
    #[error("lattice would hold {points} points, above the budget of {budget}")]
    TooLarge { points: u128, budget: u128 },
    #[error("assumption violated: {0}")]
    AssumptionViolation(String),
    #[error("policy is not Bayes-plausible (gap {gap:e})")]
    InfeasiblePolicy { gap: f64 },
    #[error("prior puts zero mass on state {state}")]
    ZeroPriorState { state: usize },
    #[error("variant mismatch: {0}")]
    VariantMismatch(String),
    #[error("step too small: {0}")]
    StepTooSmall(String),
    #[error("not paired at {cell}: denominator {denominator:e} below threshold {threshold:e}")]
    NotPaired {
        cell: String,
        denominator: f64,
        threshold: f64,
    },
    #[error("covariate grid is not rectangular: {0}")]
    GridNotRectangular(String),
    #[error("interpolation path leaves the covariate support at t = {t}")]
    PathLeavesSupport { t: f64 },
    #[error("no conditional means available at {0}")]
    PathPointMissing(String),
    #[error("utility tilts are not available from this mean source")]
    TiltUnavailable,
    #[error("draw {draw}: {source}")]
    Draw { draw: u64, source: Box<Error> },
    #[error("rejection budget exceeded: {rejected} of {draws} draws rejected")]
    RejectionBudget { rejected: u64, draws: u64 },
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
