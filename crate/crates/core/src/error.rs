use thiserror::Error;

/// Errors produced by the game model, the seeking iterations and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("need at least 2 prosumers, got {0}")]
    TooFewProsumers(usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("consensus weight {omega} exceeds the bound 1/(1 + max degree) = {bound}")]
    WeightBound { omega: f64, bound: f64 },

    #[error("communication graph is disconnected")]
    Disconnected,

    #[error("self-loop at node {0}")]
    SelfLoop(usize),

    #[error("node index {index} out of range for {count} nodes")]
    NodeOutOfRange { index: usize, count: usize },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("no admissible step size: largest nonzero graph eigenvalue {lambda_max} >= 2")]
    NoAdmissibleStepSize { lambda_max: f64 },

    #[error("spectral radius {0} is not below 1")]
    NotContractive(f64),

    #[error("iteration diverged at step {iteration} (|entry| > 1e12)")]
    Divergence { iteration: usize },

    #[error("attack window too short: {0} observed iterations, need at least 2")]
    WindowTooShort(usize),

    #[error("report audit failed: {0}")]
    Audit(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_)
            | Error::TooFewProsumers(_)
            | Error::DimensionMismatch { .. }
            | Error::WeightBound { .. }
            | Error::Disconnected
            | Error::SelfLoop(_)
            | Error::NodeOutOfRange { .. }
            | Error::WindowTooShort(_)
            | Error::Config(_) => "config",
            Error::SingularSystem(_)
            | Error::NoAdmissibleStepSize { .. }
            | Error::NotContractive(_) => "numerical",
            Error::Divergence { .. } => "divergence",
            Error::Parse(_) | Error::Json(_) => "parse",
            Error::Io(_) => "io",
            Error::Audit(_) => "audit",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
