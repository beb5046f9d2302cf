use thiserror::Error;

use crate::types::{BucketId, SpeakerId};

pub type Result<T> = std::result::Result<T, ConsentError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsentError {
    #[error("mismatched lengths: {what} (expected {expected}, got {actual})")]
    MismatchedLengths {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("registration flag for bucket position {index} is {value}, must be 0 or 1")]
    InvalidRegFlag { index: usize, value: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("topology holds no speakers")]
    EmptyTopology,
    #[error("memory budget {max_mem} too small for {total_speakers} speakers")]
    BudgetTooSmall {
        max_mem: usize,
        total_speakers: usize,
    },
    #[error("cannot draw {requested} samples without replacement from {available}")]
    SampleExceedsPopulation { requested: usize, available: usize },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("replay buffer would hold {rows} rows, budget is {max_mem}")]
    BufferOverflow { rows: usize, max_mem: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pooled vector has zero norm")]
    ZeroNorm,
    #[error("degenerate contrastive batch: {0}")]
    DegenerateBatch(String),
    #[error("label {label} outside classifier head of width {classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("hold-out set is empty")]
    EmptyHoldout,

    #[error("prototype group for speaker {speaker} in bucket {bucket} is empty")]
    EmptyGroup {
        speaker: SpeakerId,
        bucket: BucketId,
    },
    #[error("vector dimensions differ ({left} vs {right})")]
    DimMismatch { left: usize, right: usize },
    #[error("no prototypes to match against")]
    NoPrototypes,
    #[error("registration round produced no unique buckets while {pending} speakers are pending")]
    EmptyRound { pending: usize },

    #[error("bucket {bucket} would keep {residual} residual speakers, at least 2 are required")]
    TooFewResiduals { bucket: BucketId, residual: usize },
    #[error("speaker {speaker} was not removed from bucket {bucket}")]
    NotPreviouslyRemoved {
        speaker: SpeakerId,
        bucket: BucketId,
    },
    #[error("unknown speaker {0}")]
    UnknownSpeaker(SpeakerId),
    #[error("unknown bucket {0}")]
    UnknownBucket(BucketId),
    #[error("speaker {speaker} has no utterances left to draw from")]
    ExhaustedUtterances { speaker: SpeakerId },

    #[error("trial set needs at least two speakers")]
    TooFewSpeakers,
    #[error("trial set needs at least one target and one nontarget trial")]
    DegenerateTrials,

    #[error("checkpoint content hash does not match")]
    HashMismatch,
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ConsentError {
    fn from(err: std::io::Error) -> Self {
        ConsentError::Io(err.to_string())
    }
}
