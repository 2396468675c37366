use thiserror::Error;

use crate::noising::MaskStrategy;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty charset")]
    EmptyCharset,
    #[error("duplicate symbol {0:?} in charset")]
    DuplicateSymbol(char),
    #[error("text too long: {len} symbols exceeds L = {max}")]
    TooLong { len: usize, max: usize },
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(char),
    #[error("{what} out of range: {value} not in [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: usize,
        lo: usize,
        hi: usize,
    },
    #[error("{0:?} pattern requires a confidence provider")]
    MissingConfidence(MaskStrategy),
    #[error("empty lexicon")]
    EmptyLexicon,
    #[error("lexicon line {line}: {reason}")]
    Lexicon { line: usize, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation in {0}")]
    NonFinite(String),
    #[error("denoising loss needs at least one masked position")]
    EmptyMask,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("block partition needs 1 <= K <= L (L = {len}, K = {steps})")]
    BlockPartition { len: usize, steps: usize },
    #[error("remask called at step {step} but the policy has only K = {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("{msg} at offset {offset}")]
    Checkpoint { offset: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("length mismatch: {preds} predictions vs {refs} references")]
    LengthMismatch { preds: usize, refs: usize },
    #[error("empty evaluation set")]
    EmptyEval,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
