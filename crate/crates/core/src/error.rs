use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynsysError {
    #[error("stacked state matrix is rank deficient (σ_min/σ_max = {ratio:e})")]
    SingularStack { ratio: f64 },
    #[error("need {needed} states, got {got}")]
    TooFewStates { needed: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatagenError {
    #[error("label pair index {0} out of range (0..25)")]
    PairOutOfRange(usize),
    #[error("system {system} needs {needed} states but library sequences have length {length}")]
    LibraryExhausted {
        system: usize,
        needed: usize,
        length: usize,
    },
    #[error("library is empty")]
    EmptyLibrary,
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
}

/// Errors raised while reading or writing the binary file formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid dims: n_heads ({n_heads}) × d_head ({d_head}) != d_model ({d_model})")]
    InvalidDims {
        n_heads: usize,
        d_head: usize,
        d_model: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("non-finite loss {loss} at step {step} (examples seen {examples_seen})")]
    NonFiniteLoss {
        loss: f64,
        step: u64,
        examples_seen: u64,
    },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("test library has {available} systems but the needle dataset needs {needed}")]
    InsufficientSystems { needed: usize, available: usize },
    #[error("invalid needle config: {0}")]
    InvalidConfig(String),
    #[error("test library sequences of length {length} are too short (need {needed})")]
    LibraryTooShort { needed: usize, length: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OodError {
    #[error("wrong segment index {0} equals the needle index")]
    IndexCollision(usize),
    #[error("segment index {index} out of range for a haystack of {n_systems}")]
    SegmentOutOfRange { index: usize, n_systems: usize },
    #[error("synchronized rotations need the orthogonal family")]
    FamilyUnsupported,
    #[error("every label pair is used by the haystack")]
    NoFreeLabel,
    #[error("fresh system {0} also appears in the haystack")]
    SystemCollision(usize),
    #[error("dataset has no uncut needle query to transform")]
    UncutDataset,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Error)]
pub enum CircuitError {
    #[error("unsupported architecture: {0}")]
    UnsupportedArch(String),
    #[error("gate training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("circuits come from different graphs")]
    GraphMismatch,
    #[error("invalid task data: {0}")]
    TaskData(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}
