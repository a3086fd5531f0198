//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid tensor shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: NaN encountered in input")]
    NanInput { op: &'static str },

    #[error("rope: position {position} outside table range {max_positions}")]
    PositionOutOfRange {
        position: usize,
        max_positions: usize,
    },

    #[error("kv cache: context overflow: {requested} tokens requested, capacity {capacity}, {filled} already filled")]
    ContextOverflow {
        requested: usize,
        filled: usize,
        capacity: usize,
    },

    #[error("projector: token count {tokens} is not a perfect square grid")]
    GridNotSquare { tokens: usize },

    #[error("projector: grid side {side} not divisible by 2 before a stride-2 stage")]
    OddGrid { side: usize },

    #[error("projector: residual requires stride 1 and preserved width (stride {stride}, {in_channels}->{out_channels})")]
    InvalidResidual {
        stride: usize,
        in_channels: usize,
        out_channels: usize,
    },

    #[error("projector: cannot parse spec grammar {text:?}: {reason}")]
    SpecGrammar { text: String, reason: String },

    #[error("conv: even kernel size {kernel} rejected (no symmetric padding)")]
    EvenKernel { kernel: usize },

    #[error("quantize: non-finite weight {value} at flat index {index}")]
    NonFiniteWeight { index: usize, value: f32 },

    #[error("dequantize: code {code} out of range for {mode} at flat index {index}")]
    CorruptCode {
        mode: &'static str,
        code: i32,
        index: usize,
    },

    #[error("model assembly: {from_module} output width {from_dim} does not match {to_module} input width {to_dim}")]
    DimensionChain {
        from_module: &'static str,
        from_dim: usize,
        to_module: &'static str,
        to_dim: usize,
    },

    #[error("checkpoint: bad magic (expected \"MVLM\")")]
    BadMagic,

    #[error("checkpoint: unsupported version {version}")]
    UnsupportedVersion { version: u32 },

    #[error("checkpoint: truncated file: needed {needed} bytes at offset {offset}, file has {available}")]
    Truncated {
        offset: u64,
        needed: u64,
        available: u64,
    },

    #[error("checkpoint: tensor {name:?} blob [{offset}, {end}) overlaps or precedes previous blob end {previous_end}")]
    OffsetOverlap {
        name: String,
        offset: u64,
        end: u64,
        previous_end: u64,
    },

    #[error("checkpoint: duplicate tensor name {name:?}")]
    DuplicateTensor { name: String },

    #[error("checkpoint: tensor {name:?} offset {offset} is not 32-byte aligned")]
    BadAlignment { name: String, offset: u64 },

    #[error("checkpoint: missing tensor {name:?}")]
    MissingTensor { name: String },

    #[error("checkpoint: malformed config blob: {reason}")]
    MalformedConfig { reason: String },

    #[error("tokenizer: {reason}")]
    Vocab { reason: String },

    #[error("prompt: {reason}")]
    Prompt { reason: String },

    #[error("generate: token id {id} outside model vocabulary {vocab_size}")]
    TokenOutOfVocab { id: u32, vocab_size: usize },

    #[error("generate: image supplied but the model has no vision encoder or projector")]
    NoVisionPath,

    #[error("bench: {reason}")]
    Bench { reason: String },

    #[error("oracle: input exceeds oracle size cap: {what} = {got}, cap {cap}")]
    OracleSizeCap {
        what: &'static str,
        got: usize,
        cap: usize,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
