use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {dims:?}: {reason}")]
    Shape { dims: Vec<usize>, reason: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("softmax row {row} has no unmasked entries")]
    DegenerateRow { row: usize },

    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("voxel index {value} on axis {axis} outside the hashable range")]
    Range { axis: usize, value: i64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at step {step}: {term} is not finite")]
    Divergence { step: usize, term: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
