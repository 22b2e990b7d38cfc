//! Autoregressive nucleotide decoder over adapter nodes: causal pair-biased
//! attention on the scalar path, per-residue gated vector updates.

use rand::Rng;

use ribosphere_tensor::nn::{self, init_embedding, init_layer_norm, init_linear};
use ribosphere_tensor::{ParamStore, Tape, Var};

use super::adapter::{mix_channels, vector_norms, AdapterOutput};
use super::InvfoldConfig;
use crate::attention::{self, attention_block, init_attention_block, init_pair_features, AttentionMask};
use crate::error::Result;
use crate::geometry::Point;

pub const PREFIX: &str = "invfold.dec";
pub const VOCAB: usize = 4;
/// Previous-nucleotide index fed at the first position.
pub const START_TOKEN: usize = 4;

pub fn init_decoder<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &InvfoldConfig, rng: &mut R) {
    let (d, k) = (cfg.scalar_dim, cfg.vector_channels);
    init_embedding(store, &format!("{PREFIX}.prev"), VOCAB + 1, d, rng);
    init_pair_features(store, &format!("{PREFIX}.pair"), &cfg.pair_config(), rng);
    for b in 0..cfg.blocks {
        let p = format!("{PREFIX}.blocks.{b}");
        init_attention_block(store, &format!("{p}.attn"), cfg.block_shape(), rng);
        init_linear(store, &format!("{p}.v2s"), k, d, true, rng);
        init_linear(store, &format!("{p}.gate"), d, k, true, rng);
        init_linear(store, &format!("{p}.mix"), k, k, false, rng);
    }
    init_layer_norm(store, &format!("{PREFIX}.out_ln"), d);
    init_linear(store, &format!("{PREFIX}.head"), d, VOCAB, true, rng);
}

/// `[L, 4]` logits. `prev[i]` is the nucleotide at `i − 1` (or
/// [`START_TOKEN`]), so position `i` sees only `s_{<i}`.
pub fn decoder_logits(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &InvfoldConfig,
    geo: AdapterOutput,
    anchors: &[Point],
    present: &[bool],
    prev: &[usize],
) -> Result<Var> {
    let l = prev.len();
    let pair = attention::pair_features(tape, store, &format!("{PREFIX}.pair"), anchors, present, &cfg.pair_config())?;
    let mask = AttentionMask::Causal.build(l);
    let e = nn::embedding(tape, store, &format!("{PREFIX}.prev"), prev)?;
    let mut s = tape.add(geo.node_s, e)?;
    let mut v = geo.node_v;
    for b in 0..cfg.blocks {
        let p = format!("{PREFIX}.blocks.{b}");
        s = attention_block(tape, store, &format!("{p}.attn"), s, pair, cfg.block_shape(), mask.as_deref())?;
        let n = vector_norms(tape, v)?;
        let fb = nn::linear(tape, store, &format!("{p}.v2s"), n)?;
        s = tape.add(s, fb)?;
        let g = nn::linear(tape, store, &format!("{p}.gate"), s)?;
        let g = tape.sigmoid(g)?;
        let gated = tape.mul_bcast_last(v, g)?;
        v = mix_channels(tape, store, &format!("{p}.mix"), gated)?;
    }
    let s = nn::layer_norm(tape, store, &format!("{PREFIX}.out_ln"), s)?;
    Ok(nn::linear(tape, store, &format!("{PREFIX}.head"), s)?)
}
