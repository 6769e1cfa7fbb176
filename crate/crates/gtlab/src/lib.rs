//! Simulation lab for gradient-tracking methods on static networks.
//!
//! The crate is organized as a pipeline:
//!
//! * [`topology`] — graphs, combination (mixing) matrices, and their
//!   spectral objects (mixing rate, mean-zero eigenbasis).
//! * [`problems`] — synthetic local objectives with exact and stochastic
//!   gradient oracles, plus certified constants (L, mu, sigma^2, x*).
//! * [`algorithms`] — steppers for gradient tracking (both its tracking
//!   and primal–dual forms), decentralized SGD, and centralized SGD,
//!   all driven by one shared, replayable sample stream.
//! * [`analysis`] — error coordinates, fixed points, the block
//!   decomposition of the error dynamics, coupled-inequality checks, and
//!   the rate/stepsize calculators.
//! * [`harness`] — experiment runner, stepsize tuner, verification
//!   suite, and CSV output.

pub mod algorithms;
pub mod analysis;
pub mod harness;
pub mod problems;
pub mod topology;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Graph/topology construction was asked for an impossible size.
    #[error("invalid graph size: {0}")]
    InvalidSize(String),

    /// A weight matrix is not primitive (disconnected support or no
    /// spectral gap), so consensus iterations cannot mix.
    #[error("weight matrix is not primitive: {0}")]
    NotPrimitive(String),

    /// A weight rule cannot be applied to the given graph.
    #[error("weight rule not applicable: {0}")]
    WeightRule(String),

    /// Matrix or vector dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A supplied spectrum is outside the open unit interval handled by
    /// the error-system decomposition.
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    /// The dual fixed-point system is singular (unit eigenvalue in the
    /// mean-zero subspace).
    #[error("singular fixed-point system: {0}")]
    SingularSystem(String),

    /// An analysis routine was called outside its regime (stochastic
    /// trace where a noiseless one is required, stepsize precondition
    /// violated, ...).
    #[error("mode error: {0}")]
    Mode(String),

    /// A strongly-convex-only calculator was given a merely convex
    /// problem (mu = 0), or vice versa.
    #[error("wrong regime: {0}")]
    WrongRegime(String),

    /// Numerical construction of a problem failed (e.g. the optimum
    /// solver did not converge).
    #[error("oracle construction failed: {0}")]
    OracleConstruction(String),

    /// Invalid run configuration or flag combination.
    #[error("config error: {0}")]
    Config(String),

    /// The stepsize tuner exhausted its grid without reaching the target.
    #[error("tuning failed: {0}")]
    TuningFailed(String),

    /// Malformed input text (edge list, config file, snapshot).
    #[error("parse error: {0}")]
    Parse(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
