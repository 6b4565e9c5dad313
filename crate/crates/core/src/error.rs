use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("subject {subject}: two events at time {time}")]
    Tie { subject: u64, time: f64 },
    #[error("subject {subject}: event times not increasing at {time}")]
    Unordered { subject: u64, time: f64 },
    #[error("subject {subject}: event at {time} after a terminal event")]
    PostTerminalEvent { subject: u64, time: f64 },
    #[error("subject {subject}: event time {time} outside (0, {tau}]")]
    OutOfRange { subject: u64, time: f64, tau: f64 },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("empty risk set for {0}")]
    EmptyRiskSet(String),
    #[error("fold too small: {0}")]
    FoldTooSmall(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("zero denominator: {0}")]
    ZeroDenominator(String),
    #[error("sparse time point: {0}")]
    SparseTimePoint(String),
    #[error("model too large to enumerate: {0}")]
    TooLarge(String),
    #[error("misaligned cohorts: {0}")]
    MisalignedCohorts(String),
    #[error("model not fitted: {0}")]
    UnfittedModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
