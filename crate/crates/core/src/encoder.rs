//! Geometric transformer encoder: flattened-coordinate embedding, pair
//! features on C4′ distances and pair-biased attention layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use ribosphere_tensor::nn::{self, init_layer_norm, init_mlp};
use ribosphere_tensor::{ParamStore, Tape, Var};

use crate::attention::{self, AttentionMask, BlockShape, PairConfig};
use crate::error::{Error, Result};
use crate::structure::{mean_center, AtomSet, RnaStructure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub pair_dim: usize,
    pub window: Option<usize>,
    pub dist_bins: usize,
    pub dist_max: f64,
    pub relpos_clip: usize,
    pub mlp_factor: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_dim: 256,
            heads: 8,
            pair_dim: 64,
            window: Some(8),
            dist_bins: 64,
            dist_max: 40.0,
            relpos_clip: 32,
            mlp_factor: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.block_shape().validate()?;
        self.pair_config().validate()?;
        AttentionMask::from_window(self.window)?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            dim: self.hidden_dim,
            heads: self.heads,
            pair_dim: self.pair_dim,
            mlp_factor: self.mlp_factor,
        }
    }

    pub fn pair_config(&self) -> PairConfig {
        PairConfig {
            pair_dim: self.pair_dim,
            dist_bins: self.dist_bins,
            dist_max: self.dist_max,
            relpos_clip: self.relpos_clip,
        }
    }
}

pub const PREFIX: &str = "encoder";

pub fn init_encoder<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, atom_set: AtomSet, rng: &mut R) {
    let d = cfg.hidden_dim;
    init_mlp(store, &format!("{PREFIX}.in"), 3 * atom_set.len(), d, d, rng);
    attention::init_pair_features(store, &format!("{PREFIX}.pair"), &cfg.pair_config(), rng);
    for i in 0..cfg.layers {
        attention::init_attention_block(store, &format!("{PREFIX}.layers.{i}"), cfg.block_shape(), rng);
    }
    init_layer_norm(store, &format!("{PREFIX}.out_ln"), d);
}

/// `MLP_in(vec(x̃_i))` for centred, scaled coordinates given as `L × 3A`.
pub fn embed_nucleotides(tape: &mut Tape, store: &ParamStore, flat: &[f64], l: usize, atoms: usize) -> Result<Var> {
    if flat.len() != l * 3 * atoms {
        return Err(Error::LengthMismatch(flat.len(), l * 3 * atoms));
    }
    let x = tape.constant(vec![l, 3 * atoms], flat.to_vec())?;
    Ok(nn::mlp(tape, store, &format!("{PREFIX}.in"), x)?)
}

/// Flattened coordinates divided by `coord_scale`; masked slots stay zero.
pub fn scaled_coords(s: &RnaStructure, coord_scale: f64) -> Vec<f64> {
    s.coords.iter().flat_map(|p| p.iter().map(|v| v / coord_scale)).collect()
}

/// Continuous per-residue latents `[L, d]`. The structure is mean-centred first.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    coord_scale: f64,
    s: &RnaStructure,
    atom_set: AtomSet,
) -> Result<Var> {
    if s.atom_set != atom_set {
        return Err(Error::Invalid(format!("encoder expects {atom_set}, got {}", s.atom_set)));
    }
    let s = mean_center(s)?;
    let l = s.len();
    let flat = scaled_coords(&s, coord_scale);
    let mut h = embed_nucleotides(tape, store, &flat, l, atom_set.len())?;
    let (anchors, present) = s.c4_trace();
    let pair = attention::pair_features(tape, store, &format!("{PREFIX}.pair"), &anchors, &present, &cfg.pair_config())?;
    let mask = AttentionMask::from_window(cfg.window)?.build(l);
    for i in 0..cfg.layers {
        h = attention::attention_block(tape, store, &format!("{PREFIX}.layers.{i}"), h, pair, cfg.block_shape(), mask.as_deref())?;
    }
    Ok(nn::layer_norm(tape, store, &format!("{PREFIX}.out_ln"), h)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_helix, DEFAULT_RISE, DEFAULT_TWIST_DEG};
    use ribosphere_tensor::rng::seeded;

    fn small() -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 16,
            heads: 4,
            pair_dim: 8,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn output_shape() {
        let cfg = small();
        let mut store = ParamStore::new();
        init_encoder(&mut store, &cfg, AtomSet::A10, &mut seeded(1));
        let s = synth_helix(25, DEFAULT_TWIST_DEG, DEFAULT_RISE, AtomSet::A10, &mut seeded(2)).unwrap();
        let mut t = Tape::new();
        let z = encode(&mut t, &store, &cfg, 10.0, &s, AtomSet::A10).unwrap();
        assert_eq!(t.shape(z), &[25, 16]);
        assert!(encode(&mut t, &store, &cfg, 10.0, &s.to_atom_set(AtomSet::A1).unwrap(), AtomSet::A10).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { heads: 3, ..small() }.validate().is_err());
        assert!(EncoderConfig { window: Some(0), ..small() }.validate().is_err());
        assert!(EncoderConfig { dist_max: 0.0, ..small() }.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }
}
