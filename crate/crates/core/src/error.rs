use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch {
        op: &'static str,
        detail: alloc::string::String,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("row {row} has norm {norm:e}, too small to normalize")]
    DegenerateRow { row: usize, norm: f64 },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(alloc::vec::Vec<usize>),
    #[error("rows must be unit norm: row {row} has norm {norm}")]
    NotNormalized { row: usize, norm: f64 },
    #[error("at least two classes are required, got {0}")]
    TooFewClasses(usize),
    #[error("eta must lie in (0, 1), got {0}")]
    InvalidEta(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(alloc::string::String),
    #[error("invalid synthetic dataset spec: {0}")]
    InvalidSpec(alloc::string::String),
    #[error("invalid variant: {0}")]
    InvalidVariant(alloc::string::String),
}
