use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PwlError {
    #[error("argument {0} outside [0, 1]")]
    Domain(f64),
    #[error("inner function range [{lo}, {hi}] escapes [0, 1]")]
    Range { lo: f64, hi: f64 },
    #[error("need at least two breakpoints, got {0}")]
    TooFewBreakpoints(usize),
    #[error("breakpoints must start at 0 and end at 1, got {first} .. {last}")]
    Endpoints { first: f64, last: f64 },
    #[error("breakpoints not strictly ascending at index {index}")]
    NotAscending { index: usize },
    #[error("{breakpoints} breakpoints but {slopes} slopes and {intercepts} intercepts")]
    ShapeMismatch {
        breakpoints: usize,
        slopes: usize,
        intercepts: usize,
    },
    #[error("non-finite coefficient in piece {index}")]
    NonFinite { index: usize },
    #[error("at least one action is required")]
    NoActions,
    #[error("action {action} out of range for {actions} actions")]
    BadAction { action: usize, actions: usize },
}

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("horizon parameter H = {0} too small (need H >= 3)")]
    HorizonTooSmall(u32),
    #[error("invalid horizon: {0}")]
    InvalidHorizon(String),
    #[error("{what}: expected {expected} functions, got {got}")]
    ActionCount {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("dynamics for action {action}: {source}")]
    DynamicsRange { action: usize, source: PwlError },
    #[error("action {action} out of range for {actions} actions")]
    BadAction { action: usize, actions: usize },
    #[error(transparent)]
    Pwl(#[from] PwlError),
}

#[derive(Debug, Error)]
pub enum DpError {
    #[error("Q-function has {got} actions, MDP has {expected}")]
    ActionMismatch { expected: usize, got: usize },
    #[error("piece cap exceeded at iteration {iteration}: action {action} has {pieces} pieces (cap {cap})")]
    PieceCap {
        iteration: usize,
        action: usize,
        pieces: usize,
        cap: usize,
    },
    #[error("policy schedule has {got} steps, horizon needs {expected}")]
    ScheduleLength { expected: usize, got: usize },
    #[error("bit index {0} outside 1..=52")]
    BitIndex(u32),
    #[error(transparent)]
    Pwl(#[from] PwlError),
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("planning over {sequences} action sequences exceeds budget {budget}")]
    Budget { sequences: u128, budget: u64 },
    #[error("invalid planner parameter: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value during {0}")]
    NonFinite(String),
    #[error("training diverged at update {update}: loss {loss}")]
    Diverged { update: usize, loss: f64 },
    #[error("no transitions for action {0}")]
    MissingAction(usize),
    #[error("network has {0} hidden layers; exact extraction needs exactly one")]
    NotShallow(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Pwl(#[from] PwlError),
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}
