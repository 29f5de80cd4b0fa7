use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("integration diverged at t = {time}")]
    IntegrationDiverged { time: f64 },

    #[error("tube propagation diverged at t = {time}")]
    PropagationDiverged { time: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("weibull fit failed: {0}")]
    FitFailed(String),

    #[error(
        "refusing to certify: KS test failed (statistic {statistic:.4}, p = {p_value:.4}, batch size {batch_size})"
    )]
    CertificationRefused {
        statistic: f64,
        p_value: f64,
        batch_size: usize,
    },

    #[error("contraction verification failed: {0}")]
    VerificationFailed(String),

    #[error("domain construction failed: {0}")]
    DomainConstruction(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("stage '{stage}' needs {path}; run the earlier stages first")]
    MissingArtifact { stage: String, path: std::path::PathBuf },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn dim(expected: usize, got: usize, context: &'static str) -> Self {
        Error::DimensionMismatch { expected, got, context }
    }
}
