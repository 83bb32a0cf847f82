use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pillar index {index} at sequence position {position} (valid range 1..={max})")]
    InvalidPillar { index: usize, position: usize, max: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("shape mismatch at layer {layer} ({kind}): expected input {expected:?}, got {actual:?}")]
    LayerShape {
        layer: usize,
        kind: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("label {label} out of range 1..={classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("sequence already at the length cap of {0} pillars")]
    LengthCap(usize),

    #[error("corrupt {what}: {detail}")]
    Corrupt { what: &'static str, detail: String },

    #[error("missing model: {0}")]
    MissingModel(&'static str),

    #[error("architecture mismatch: expected {expected}, found {found}")]
    Architecture { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn corrupt(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            what,
            detail: detail.into(),
        }
    }
}
