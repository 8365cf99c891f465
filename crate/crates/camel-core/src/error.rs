//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: got {shape:?} ({detail})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },

    #[error("attention mask has a fully masked query row {row}")]
    DegenerateMask { row: usize },

    #[error("input too short: {got} frames, at least {min} required")]
    InputTooShort { got: usize, min: usize },

    #[error("unknown parameter '{0}'")]
    UnknownParam(String),

    #[error("invalid token id {id}: {detail}")]
    InvalidToken { id: usize, detail: String },

    #[error("CTC target infeasible: {frames} frames cannot carry {labels} labels with {repeats} adjacent repeats")]
    InfeasibleTarget {
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("training aborted: {0}")]
    TrainingAbort(String),

    #[error("corpus spec error: {0}")]
    SynthSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
