use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("fit did not converge after {iterations} iterations: {reason}")]
    Fit {
        reason: String,
        iterations: usize,
        /// Best parameter vector reached before giving up.
        best: Vec<f64>,
    },

    #[error("coefficient {index} diverged (|beta| = {value:.3}); likely monotone likelihood or separation")]
    Separation { index: usize, value: f64 },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("unknown level `{level}` for field `{field}`")]
    Encoding { field: String, level: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss in batch {batch} of epoch {epoch}")]
    Training { epoch: usize, batch: usize },

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("empty dataset: {0}")]
    Empty(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
