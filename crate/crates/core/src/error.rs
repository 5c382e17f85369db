use thiserror::Error;

/// Failures reported by samplers, estimators and numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("integral diverges: {0}")]
    Divergent(String),

    #[error("horizon too small: vertical part at horizon {vertical} does not exceed level {level}")]
    HorizonTooSmall { vertical: f64, level: f64 },

    #[error("horizon extension failed after {doublings} doublings (horizon {horizon})")]
    HorizonExtension { doublings: usize, horizon: f64 },

    #[error("cell system exceeded node budget of {budget}")]
    NodeBudget { budget: usize },

    #[error("tree not expanded deep enough: need generation {needed}, expanded to {expanded}")]
    InsufficientDepth { needed: usize, expanded: usize },

    #[error("truncated weight mass {fraction:.4} exceeds allowed {allowed:.4}")]
    TruncationDominated { fraction: f64, allowed: f64 },

    #[error("{omega} is not a root of the cumulant (residual {residual:e})")]
    NotARoot { omega: f64, residual: f64 },

    #[error("cumulant fails convexity check (second difference {second_difference:e} at q = {q})")]
    NotConvex { q: f64, second_difference: f64 },

    #[error("invalid samples: {0}")]
    InvalidSamples(String),

    #[error("time {t} is beyond the simulated horizon {horizon}")]
    BeyondHorizon { t: f64, horizon: f64 },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
