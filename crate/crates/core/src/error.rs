use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed range [{lo}, {hi}] for {what}")]
    MalformedRange { what: &'static str, lo: f64, hi: f64 },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("scenario config: {0}")]
    Config(String),

    #[error("drift measurement needs distinct initiator stamps (c1 interval is zero)")]
    ZeroStampInterval,

    #[error("need at least {need} exchange rounds, got {got}")]
    NotEnoughRounds { need: usize, got: usize },

    #[error("noise variance estimate must be positive (train the link first), got {0}")]
    NonPositiveSigma2(f64),

    #[error("relative skew estimate must be positive, got {0}")]
    NonPositiveAlpha(f64),

    #[error("factor variance must be positive, got {0}")]
    NonPositiveFactorVar(f64),

    #[error("conflicting anchored means {a} and {b} in Gaussian product")]
    ConflictingAnchors { a: f64, b: f64 },

    #[error("missing pair statistics for edge ({0}, {1})")]
    MissingPairStats(usize, usize),

    #[error("innovation covariance is singular (determinant {0})")]
    SingularInnovation(f64),

    #[error("precision matrix is singular: some variable is disconnected from the anchor")]
    DisconnectedFromAnchor,

    #[error("integration grid too narrow: edge density {edge:.2e} of peak exceeds {limit:.2e}")]
    GridTooNarrow { edge: f64, limit: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
