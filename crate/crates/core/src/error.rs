use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("feature {feature} has non-positive mean {mean}; normalization undefined")]
    NonPositiveMean { feature: String, mean: f64 },

    #[error("dimension mismatch: expected {expected} inputs, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("search space too large: {points} points (limit {limit})")]
    TooLarge { points: u128, limit: u128 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
