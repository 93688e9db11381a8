use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singular covariance (min eigenvalue {min_eigenvalue:e} <= floor {floor:e}); apply shrinkage")]
    SingularCovariance { min_eigenvalue: f64, floor: f64 },

    #[error("window unsatisfiable: need {needed} trials, store holds {available}")]
    WindowUnsatisfiable { needed: usize, available: usize },

    #[error("target {0} is missing")]
    MissingTarget(usize),

    #[error("target {target} has {count} trial(s); at least {required} required")]
    InsufficientTrials {
        target: usize,
        count: usize,
        required: usize,
    },

    #[error("covariance unavailable for target {0} (fewer than 2 trials)")]
    CovarianceUnavailable(usize),

    #[error("mean geometry degenerate: every theta denominator hit the floor")]
    DegenerateMeanGeometry,

    #[error("transfer function for target {target} is ill-conditioned (condition number {condition:e})")]
    IllConditioned { target: usize, condition: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("malformed trial file: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parsable category used by the command-line runner.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) | Error::DimensionMismatch { .. } => "input",
            Error::Config(_) => "config",
            Error::SingularCovariance { .. }
            | Error::DegenerateMeanGeometry
            | Error::IllConditioned { .. } => "numeric",
            Error::WindowUnsatisfiable { .. }
            | Error::MissingTarget(_)
            | Error::InsufficientTrials { .. }
            | Error::CovarianceUnavailable(_) => "data",
            Error::Format(_) | Error::Json(_) => "format",
            Error::Io(_) => "io",
        }
    }
}
