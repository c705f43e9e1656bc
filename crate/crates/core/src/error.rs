use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid kernel hyperparameters: {0}")]
    InvalidHyper(String),

    #[error("local model is at capacity ({capacity} pairs); split before updating")]
    CapacityExceeded { capacity: usize },

    #[error(
        "error-bound scaling beta = {beta} is not positive; enlarge the domain or reduce delta/rho"
    )]
    NonPositiveBeta { beta: f64 },

    #[error("matrix is not Hurwitz (max real eigenvalue part {max_real})")]
    NotHurwitz { max_real: f64 },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("gain condition violated (margin {margin}); increase the control gain")]
    GainCondition { margin: f64 },

    #[error("input gain g(x) = {0} is not positive")]
    NonPositiveInputGain(f64),

    #[error("singular linear system")]
    Singular,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mismatched scenarios: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
