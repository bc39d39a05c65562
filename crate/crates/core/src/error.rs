use thiserror::Error;

#[derive(Debug, Error)]
pub enum StivError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("gradient requested of a non-scalar output with shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("condition mismatch: {0}")]
    Condition(String),
    #[error("incompatible parameter `{name}`: {detail}")]
    Incompatible { name: String, detail: String },
}

pub type Result<T> = std::result::Result<T, StivError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(StivError::Shape {
        op,
        detail: detail.into(),
    })
}
