use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward root must be scalar, got shape {0:?}")]
    NotScalarRoot(Vec<usize>),
    #[error("backward root was not recorded on this tape")]
    DetachedRoot,
    #[error("gradient for parameter `{name}` has shape {grad:?}, parameter has {param:?}")]
    MissingGradShape {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("degenerate shape: mask covers {0:.3} of the image")]
    DegenerateShape(f64),
    #[error("insufficient variety: {0}")]
    InsufficientVariety(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("malformed triplet row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("missing image {0}")]
    MissingImage(PathBuf),
    #[error("checkpoint not found: {0}")]
    MissingArtifact(PathBuf),
    #[error("empty triplet set")]
    EmptyTripletSet,
    #[error("step {step} out of range for a {len}-step schedule")]
    StepOutOfRange { step: usize, len: usize },
    #[error("step order invalid: t={t}, t_prev={t_prev:?}")]
    StepOrderInvalid { t: usize, t_prev: Option<usize> },
    #[error("interpolation time {0} outside [0, 1]")]
    TOutOfRange(f64),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
