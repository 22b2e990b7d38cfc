use thiserror::Error;

use ribosphere_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("line {line}: {msg}")]
    Pdb { line: usize, msg: String },
    #[error("no RNA chains found")]
    NoRnaChains,
    #[error("line {line}: duplicate atom {atom} in residue {residue}")]
    DuplicateAtom { line: usize, residue: String, atom: String },
    #[error("invalid structure: {0}")]
    Structure(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("terminal time t = {0} reached; switch to deterministic dynamics")]
    TerminalTime(f64),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
