//! Error type shared by all numeric modules.

use thiserror::Error;

/// Errors surfaced by the numeric kernels.
///
/// Every variant carries enough context to identify the offending argument
/// without re-running the computation.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An input contained NaN or an infinity.
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    /// A matrix factorization broke down (e.g. non-positive pivot).
    #[error("factorization failure: {0}")]
    FactorizationFailure(String),

    /// An iterative scheme exhausted its iteration budget.
    #[error("no convergence after {iterations} iterations (last delta {last_delta:e})")]
    NoConvergence { iterations: usize, last_delta: f64 },

    /// A builder-style specification is internally inconsistent.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// The requested operation is not defined for this feature-map kind.
    #[error("unsupported map kind: {0}")]
    UnsupportedMapKind(String),

    /// A token matrix or sample that must be non-empty was empty.
    #[error("empty context: {0}")]
    EmptyContext(String),

    /// A learning rate that must be non-negative was negative.
    #[error("learning rate must be non-negative, got {0}")]
    NonPositiveLearningRate(f64),

    /// A quantity that must be strictly positive was zero or negative.
    #[error("{name} must be strictly positive, got {value}")]
    NonPositiveInput { name: &'static str, value: f64 },

    /// Too few Rademacher sign draws for a stable Monte Carlo estimate.
    #[error("too few sign draws: {got} (minimum {minimum})")]
    TooFewDraws { got: usize, minimum: usize },

    /// Too few resampling rounds for a stable tail estimate.
    #[error("too few resamples: {got} (minimum {minimum})")]
    TooFewResamples { got: usize, minimum: usize },

    /// Confidence level outside the open interval (0, 1).
    #[error("delta must lie strictly between 0 and 1, got {0}")]
    InvalidDelta(f64),

    /// Step-size condition 2*eta*M_phi^2 < 1 requested but not satisfied.
    #[error("step size too large: 2*eta*M_phi^2 = {0} >= 1")]
    StepSizeTooLarge(f64),

    /// A candidate list that must contain at least one entry was empty.
    #[error("empty candidate set: {0}")]
    EmptySet(String),

    /// Requested subset size exceeds the pool size.
    #[error("subset size {k} exceeds pool size {pool}")]
    KTooLarge { k: usize, pool: usize },

    /// Malformed serialized matrix or map data.
    #[error("parse failure: {0}")]
    ParseFailure(String),

    /// Filesystem error while reading or writing serialized data.
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
