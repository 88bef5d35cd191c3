use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("unsupported shape in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("max-pool over zero unmasked rows")]
    EmptyPool,

    #[error("every position is masked in {0}")]
    Mask(&'static str),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("token id {id} is outside the vocabulary of size {size}")]
    VocabularyId { id: usize, size: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("optimizer state does not match parameter {name}: {detail}")]
    State { name: String, detail: String },

    #[error("non-finite training loss in epoch {epoch}, batch {batch} (batch seed {batch_seed:#018x})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        batch_seed: u64,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
