use saap_autodiff::AutodiffError;
use thiserror::Error;

use crate::groups::GroupKind;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} outside vocabulary of {vocab}")]
    OutOfVocab { token: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("corpus has {tokens} tokens, at least {needed} are required")]
    CorpusTooSmall { tokens: usize, needed: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite gradient in `{tensor}`")]
    NonFiniteGradient { tensor: String },

    #[error("group {group} has no weight slices")]
    EmptyGroup { group: usize },
    #[error("slice {tensor}[axis {axis}, {start}..{end}] is out of bounds for shape {shape:?}")]
    SliceOutOfBounds {
        tensor: String,
        axis: usize,
        start: usize,
        end: usize,
        shape: Vec<usize>,
    },
    #[error("group {group} ({kind:?}, layer {layer}): mask and removal differ by {max_diff:e}")]
    EquivalenceViolation {
        group: usize,
        layer: usize,
        kind: GroupKind,
        max_diff: f64,
    },

    #[error("need at least {needed} calibration samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("empty population: {0}")]
    EmptyPopulation(String),
    #[error("infeasible pruning ratio: {0}")]
    InfeasibleRatio(String),
    #[error("plan does not match model: {0}")]
    PlanMismatch(String),
    #[error("layer {layer} would keep {kept} {kind:?} groups, minimum is {minimum}")]
    SurvivorMinimum {
        layer: usize,
        kind: GroupKind,
        kept: usize,
        minimum: usize,
    },

    #[error("non-finite weight at ({row}, {col})")]
    NonFiniteWeight { row: usize, col: usize },
    #[error("code {code} out of range for {bits} bits")]
    CodeOutOfRange { code: u8, bits: u32 },
    #[error("adapter blocks do not match quantization blocks: {0}")]
    BlockMismatch(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("validation: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
