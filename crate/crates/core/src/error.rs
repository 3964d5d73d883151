use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("point outside domain: {0}")]
    OutOfDomain(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("degenerate step at node {node}: |w| = {norm:e}")]
    DegenerateStep { node: usize, norm: f64 },

    #[error("step failed at t = {time}: {source}")]
    StepFailed { time: f64, source: Box<Error> },

    #[error("insufficient temporal coverage: missing interval [{from}, {to}]")]
    Coverage { from: f64, to: f64 },

    #[error("time {requested} is not recorded (nearest recorded: {below:?}, {above:?})")]
    UnrecordedTime {
        requested: f64,
        below: Option<f64>,
        above: Option<f64>,
    },

    #[error("zero mass in ball")]
    ZeroMass,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("cost guard exceeded: {0}")]
    CostGuard(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("oracle failed at y = {point:?}, s = {radius}: {reason}")]
    Oracle {
        point: Vec<f64>,
        radius: f64,
        reason: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
