use thiserror::Error;

/// Errors raised by the goalqvi library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("goal deadlines must be strictly increasing and positive (goal {index}: {deadline})")]
    NonIncreasingDeadlines { index: usize, deadline: f64 },

    #[error("goal {index} has non-positive target {target}")]
    NonPositiveTarget { index: usize, target: f64 },

    #[error("goal {index} has non-positive weight {weight}")]
    NonPositiveWeight { index: usize, weight: f64 },

    #[error("goal schedule is empty")]
    EmptySchedule,

    #[error("goal index {index} out of range 1..={len}")]
    GoalIndexOutOfRange { index: usize, len: usize },

    #[error("time step {dt} does not divide segment [{start}, {end}]")]
    MisalignedStep { dt: f64, start: f64, end: f64 },

    #[error("state ({x0}, {x1}) lies outside the computational domain")]
    OutOfDomain { x0: f64, x1: f64 },

    #[error("time {t} lies outside segment {k} [{start}, {end}]")]
    TimeOutsideSegment { t: f64, k: usize, start: f64, end: f64 },

    #[error("unknown time level {t}")]
    UnknownTimeLevel { t: f64 },

    #[error("explicit x0 transport violates CFL: dt = {dt} > {limit}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("intervention fixed point did not converge after {iters} iterations (change {change:e})")]
    NonConvergence { iters: usize, change: f64 },

    #[error("penalty iteration did not converge at t = {t} (change {change:e}, residual {residual:e})")]
    PenaltyNonConvergence { t: f64, change: f64, residual: f64 },

    #[error("policy is incompatible with the simulation: {0}")]
    IncompatiblePolicy(String),

    #[error("simulated path {path} exceeded the trade cap of {cap}")]
    TradeCapExceeded { path: u64, cap: usize },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed data: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
