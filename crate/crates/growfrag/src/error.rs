use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Gamma function evaluated at a nonpositive integer.
    #[error("gamma pole at x = {x}")]
    GammaPole { x: f64 },

    /// Argument outside the mathematical domain of the requested function.
    #[error("domain error: {what} (got {value})")]
    Domain { what: &'static str, value: f64 },

    /// Adaptive quadrature ran out of subdivisions before reaching the target
    /// tolerance. The best value and the achieved error bound are reported so
    /// callers can decide whether the result is still usable.
    #[error("quadrature did not converge: value {value}, achieved error bound {achieved}, target {target}")]
    QuadratureNoConvergence {
        value: f64,
        achieved: f64,
        target: f64,
    },

    /// Jump intensity after truncation exceeds the configured cap.
    #[error("jump rate {rate} exceeds cap {cap}; raise delta or the cap")]
    RateOverflow { rate: f64, cap: f64 },

    /// A path was requested beyond the simulated horizon and the remaining
    /// exponential-functional tail could not be bounded below tolerance.
    #[error("simulated horizon insufficient: remaining tail bound {tail_bound} exceeds tolerance {tolerance}")]
    HorizonInsufficient { tail_bound: f64, tolerance: f64 },

    /// An input path violates a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A simulation exceeded a configured resource limit.
    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    /// Not enough data to compute the requested statistic.
    #[error("insufficient data: {what} (needed {needed}, got {got})")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    /// Configuration file could not be parsed or failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Unknown experiment identifier.
    #[error("unknown experiment id: {0}")]
    UnknownExperiment(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;
