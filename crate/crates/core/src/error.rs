use thiserror::Error;

/// Errors produced anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("optimization did not converge: {message} (best value {best_value}, best point {best_point:?})")]
    Optimization {
        message: String,
        best_point: Vec<f64>,
        best_value: f64,
    },

    #[error("linear algebra error: {0}")]
    LinearAlgebra(String),

    #[error("particle filter degenerated at t = {t}: all weights vanished")]
    FilterDegeneracy { t: usize },

    #[error("ingestion error at row {row}: {message}")]
    Data { row: usize, message: String },

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("missing artifact `{path}`; produce it with `lossabf {producer}`")]
    MissingArtifact { path: String, producer: String },

    #[error("artifact `{path}` was produced by config {found}, expected {expected}")]
    ConfigMismatch {
        path: String,
        expected: String,
        found: String,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Config(_) | Error::MissingArtifact { .. } | Error::ConfigMismatch { .. } => 1,
            Error::Data { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
            Error::Domain(_)
            | Error::Optimization { .. }
            | Error::LinearAlgebra(_)
            | Error::FilterDegeneracy { .. }
            | Error::Estimation(_)
            | Error::DimensionMismatch { .. } => 3,
        }
    }
}
