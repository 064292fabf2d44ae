use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter for {op}: {detail}")]
    Parameter { op: &'static str, detail: String },

    #[error("tape state error: {0}")]
    State(String),

    #[error("non-finite value produced by `{label}`")]
    NonFinite { label: String },

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },
}

pub type Result<T> = std::result::Result<T, NumError>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> NumError {
    NumError::Dimension {
        op,
        detail: detail.into(),
    }
}
