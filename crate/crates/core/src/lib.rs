//! RiboSphere: discrete geometric tokens for RNA backbones.
//!
//! Coordinates are encoded by a pair-biased transformer, quantised with FSQ
//! and decoded by a conditional flow-matching network. The crate also holds
//! the structure IO, evaluation metrics, codebook analysis and the inverse
//! folding model that reuses the frozen tokenizer.

pub mod analysis;
pub mod attention;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod fsq;
pub mod geometry;
pub mod invfold;
pub mod metrics;
pub mod model;
pub mod pdb;
pub mod pipeline;
pub mod report;
pub mod split;
pub mod structure;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use fsq::{FsqConfig, TokenSequence};
pub use model::{ModelConfig, RiboModel};
pub use structure::{AtomSet, Base, RnaStructure};
