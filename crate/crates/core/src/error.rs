use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: coordinate {coord} holds symbol {value}, alphabet size is {symbols}")]
    InvalidState {
        coord: usize,
        value: usize,
        symbols: usize,
    },

    #[error("state index {index} out of range for {n_states} states")]
    IndexOutOfRange { index: usize, n_states: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("time must be nonnegative and finite, got {0}")]
    InvalidTime(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("distribution is not normalized (sum = {0})")]
    Unnormalized(f64),

    #[error("full-support violation: state {state} has probability {prob}")]
    FullSupport { state: usize, prob: f64 },

    #[error("oracle cap exceeded: {states} states (cap {cap}); use sampling-based evaluation")]
    OracleCap { states: u128, cap: usize },

    #[error("{what}: entry {index} is {value}, must be strictly positive")]
    NonPositive {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("rate-bound violation: aggregate score {aggregate} at state {state} exceeds lambda {lambda}")]
    RateBound {
        state: usize,
        aggregate: f64,
        lambda: f64,
    },

    #[error("poisson mean {mean} exceeds guard {guard}")]
    PoissonGuard { mean: f64, guard: f64 },

    #[error("numeric abort at epoch {epoch}, interval {interval}, batch {batch}: {what}")]
    NumericAbort {
        epoch: usize,
        interval: usize,
        batch: usize,
        what: String,
    },

    #[error("interpolation failed: {0}")]
    Interpolation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
