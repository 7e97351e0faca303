use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("enumeration too large: {size} outcomes exceeds the cap of {cap}")]
    EnumerationTooLarge { size: u128, cap: u64 },

    /// Conditioning on an event of probability zero.
    #[error("conditioning on a null event: {0}")]
    NullEvent(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("world has no outcome map")]
    MissingOutcomeMap,

    #[error("learned-table teacher requested but no teacher logits are present")]
    MissingTeacherLogits,

    #[error("contrastive input list is empty")]
    EmptyContrastive,

    #[error("contrastive input {0} equals the matched input")]
    ContrastiveIsMatched(usize),

    #[error("projection groups carry zero probability mass")]
    DegenerateProjection,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
