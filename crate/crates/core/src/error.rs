use numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurvError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("subject `{subject}` has no covariate value at t = {knot}")]
    Ingestion { subject: String, knot: f64 },

    #[error("evaluation failed at layer `{layer}`")]
    Evaluation { layer: String },

    #[error("log-hazard {value} exceeds the exp overflow guard ({limit})")]
    Overflow { value: f64, limit: f64 },

    #[error("training aborted after epoch {epoch}: {reason}")]
    TrainingAborted {
        epoch: usize,
        reason: String,
        /// Parameters from the best validation epoch seen before the abort.
        checkpoint: Option<Box<crate::deeponet::FittedDeepOnet>>,
    },

    #[error("Newton-Raphson did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        trace: Vec<f64>,
    },

    #[error("evaluation range error: {0}")]
    EvaluationRange(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Numeric(#[from] NumError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SurvError>;
