//! Dense `f64` tensors with tape-based reverse-mode differentiation, the
//! layer helpers built on it, AdamW, and the checkpoint container.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod nn;
pub mod opcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use optim::AdamW;
pub use params::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Variance floor used by every layer normalization.
pub const LN_EPS: f64 = 1e-12;
