use thiserror::Error;

/// Errors raised by model construction, kernel evaluation and the numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("structural error: {0}")]
    Structure(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("duration {u} is outside the kernel domain [0, inf)")]
    Domain { u: f64 },

    #[error("uniformization bound too small at u = {u}: c_{state}(u) = {rate} exceeds gamma = {gamma}")]
    BoundViolation { u: f64, state: usize, rate: f64, gamma: f64 },

    #[error("transition probabilities of state {state} at duration {u} sum to {sum}, expected 1")]
    KernelInconsistency { u: f64, state: usize, sum: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("grid of {required} bytes exceeds the memory budget of {budget} bytes")]
    MemoryBudget { required: usize, budget: usize },

    #[error("iteration did not converge after {iterations} steps (last increment {increment:e})")]
    NotConverged { iterations: usize, increment: f64 },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
