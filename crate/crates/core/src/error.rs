use thiserror::Error;

/// Errors raised by the solver stack.
#[derive(Debug, Error)]
pub enum MfeError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("empty admissible action set at t={t}, state {state}")]
    EmptyAdmissibleSet { t: f64, state: usize },

    #[error("action {action} is not admissible at t={t}, state {state} (interval [{lo}, {hi}])")]
    InadmissibleAction {
        t: f64,
        state: usize,
        action: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("argmin oracle failed at t={t}, state {state}: {reason}")]
    ArgminFailure { t: f64, state: usize, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = MfeError> = std::result::Result<T, E>;
