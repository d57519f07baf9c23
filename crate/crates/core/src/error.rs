use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("gradients have not been populated")]
    GradsAbsent,
    #[error("function is not deterministic: {0} differs between evaluations")]
    NonDeterministic(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint is missing entry `{0}`")]
    MissingEntry(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("sequence of length {len} exceeds limit {limit}")]
    TooLong { len: usize, limit: usize },
    #[error("target sequence does not end with EOS")]
    MissingEos,
    #[error("prefix already terminated with EOS")]
    PrefixTerminated,
    #[error("line count mismatch: {source_lines} source lines vs {target_lines} target lines")]
    LineCountMismatch {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("enumeration space of {0} sequences is too large")]
    SpaceTooLarge(usize),
    #[error("discriminator stopped at accuracy {accuracy:.4} after {steps} steps without reaching gate {gate}")]
    GateNotReached {
        accuracy: f64,
        gate: f64,
        steps: usize,
    },
    #[error("training diverged at step {step}: mean |reward| = {mean_abs_reward}")]
    Diverged { step: usize, mean_abs_reward: f64 },
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
