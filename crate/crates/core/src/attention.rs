//! Pair features and pair-biased multi-head self-attention shared by the
//! encoder, the vector-field network and the sequence decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use ribosphere_tensor::nn::{self, init_embedding, init_layer_norm, init_linear, init_mlp};
use ribosphere_tensor::{ParamStore, Tape, Var};

use crate::error::{Error, Result};
use crate::geometry::{self, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub pair_dim: usize,
    pub dist_bins: usize,
    pub dist_max: f64,
    pub relpos_clip: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            pair_dim: 64,
            dist_bins: 64,
            dist_max: 40.0,
            relpos_clip: 32,
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pair_dim == 0 || self.dist_bins == 0 {
            return Err(Error::Config("pair_dim and dist_bins must be positive".into()));
        }
        if !(self.dist_max > 0.0) {
            return Err(Error::Config(format!("dist_max must be positive, got {}", self.dist_max)));
        }
        Ok(())
    }

    /// Distance vocabulary: `dist_bins` uniform bins plus one for pairs with a
    /// missing anchor atom.
    pub fn dist_vocab(&self) -> usize {
        self.dist_bins + 1
    }
}

pub fn distance_bin(d: f64, cfg: &PairConfig) -> usize {
    let w = cfg.dist_max / cfg.dist_bins as f64;
    ((d / w).floor().max(0.0) as usize).min(cfg.dist_bins - 1)
}

/// Row-major `L × L` distance-bin indices between anchor atoms.
pub fn distance_bins(anchors: &[Point], present: &[bool], cfg: &PairConfig) -> Vec<usize> {
    let l = anchors.len();
    let mut out = vec![0; l * l];
    for i in 0..l {
        for j in 0..l {
            out[i * l + j] = if present[i] && present[j] {
                distance_bin(geometry::dist(anchors[i], anchors[j]), cfg)
            } else {
                cfg.dist_bins
            };
        }
    }
    out
}

/// Row-major `L × L` indices of `clamp(j − i, −clip, clip) + clip`.
pub fn relpos_indices(l: usize, clip: usize) -> Vec<usize> {
    let c = clip as i64;
    let mut out = Vec::with_capacity(l * l);
    for i in 0..l as i64 {
        for j in 0..l as i64 {
            out.push(((j - i).clamp(-c, c) + c) as usize);
        }
    }
    out
}

pub fn init_pair_features<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &PairConfig, rng: &mut R) {
    init_embedding(store, &format!("{prefix}.dist"), cfg.dist_vocab(), cfg.pair_dim, rng);
    init_embedding(store, &format!("{prefix}.pos"), 2 * cfg.relpos_clip + 1, cfg.pair_dim, rng);
    init_layer_norm(store, &format!("{prefix}.ln"), cfg.pair_dim);
    init_mlp(store, &format!("{prefix}.mlp"), cfg.pair_dim, cfg.pair_dim, cfg.pair_dim, rng);
}

/// `MLP_pair(LN(e_dist + e_pos))` as an `L × L × pair_dim` tensor.
pub fn pair_features(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    anchors: &[Point],
    present: &[bool],
    cfg: &PairConfig,
) -> Result<Var> {
    let l = anchors.len();
    let bins = distance_bins(anchors, present, cfg);
    let rel = relpos_indices(l, cfg.relpos_clip);
    let ed = nn::embedding(tape, store, &format!("{prefix}.dist"), &bins)?;
    let ep = nn::embedding(tape, store, &format!("{prefix}.pos"), &rel)?;
    let e = tape.add(ed, ep)?;
    let e = nn::layer_norm(tape, store, &format!("{prefix}.ln"), e)?;
    let p = nn::mlp(tape, store, &format!("{prefix}.mlp"), e)?;
    Ok(tape.reshape(p, &[l, l, cfg.pair_dim])?)
}

/// Which keys each query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMask {
    Full,
    Window(usize),
    Causal,
}

impl AttentionMask {
    pub fn from_window(window: Option<usize>) -> Result<Self> {
        match window {
            None => Ok(AttentionMask::Full),
            Some(0) => Err(Error::Config("attention window must be at least 1".into())),
            Some(w) => Ok(AttentionMask::Window(w)),
        }
    }

    /// Row-major `L × L` permission flags, or `None` when every key is allowed.
    pub fn build(self, l: usize) -> Option<Vec<bool>> {
        match self {
            AttentionMask::Full => None,
            AttentionMask::Window(w) => {
                Some((0..l * l).map(|k| (k / l).abs_diff(k % l) <= w).collect())
            }
            AttentionMask::Causal => Some((0..l * l).map(|k| k % l <= k / l).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub pair_dim: usize,
    pub mlp_factor: usize,
}

impl BlockShape {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("hidden dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.mlp_factor == 0 {
            return Err(Error::Config("mlp_factor must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_attention_block<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, shape: BlockShape, rng: &mut R) {
    let d = shape.dim;
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    for n in ["q", "k", "v"] {
        init_linear(store, &format!("{prefix}.{n}"), d, d, false, rng);
    }
    init_linear(store, &format!("{prefix}.o"), d, d, true, rng);
    init_linear(store, &format!("{prefix}.bias"), shape.pair_dim, shape.heads, false, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_mlp(store, &format!("{prefix}.mlp"), d, d * shape.mlp_factor, d, rng);
}

/// `softmax(Q Kᵀ / √d_k + bias)` with disallowed keys given zero weight.
///
/// `q`, `k` are `[H, L, d_k]`, `bias` is `[H, L, L]`.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, bias: Var, mask: Option<&[bool]>) -> Result<Var> {
    let dk = *tape.shape(q).last().expect("rank >= 1");
    let s = tape.matmul_nt(q, k)?;
    let s = tape.scale(s, 1.0 / (dk as f64).sqrt())?;
    let s = tape.add(s, bias)?;
    Ok(tape.masked_softmax(s, mask)?)
}

fn split_heads(tape: &mut Tape, x: Var, l: usize, heads: usize, dk: usize) -> Result<Var> {
    let x = tape.reshape(x, &[l, heads, dk])?;
    Ok(tape.permute(x, &[1, 0, 2])?)
}

/// Pre-norm pair-biased attention with residual, followed by a residual MLP.
///
/// `h` is `[L, dim]`, `pair` is `[L, L, pair_dim]`.
pub fn attention_block(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    h: Var,
    pair: Var,
    shape: BlockShape,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let l = tape.shape(h)[0];
    let dk = shape.dim / shape.heads;
    let x = nn::layer_norm(tape, store, &format!("{prefix}.ln1"), h)?;
    let q = nn::linear(tape, store, &format!("{prefix}.q"), x)?;
    let k = nn::linear(tape, store, &format!("{prefix}.k"), x)?;
    let v = nn::linear(tape, store, &format!("{prefix}.v"), x)?;
    let q = split_heads(tape, q, l, shape.heads, dk)?;
    let k = split_heads(tape, k, l, shape.heads, dk)?;
    let v = split_heads(tape, v, l, shape.heads, dk)?;
    let b = nn::linear(tape, store, &format!("{prefix}.bias"), pair)?;
    let b = tape.permute(b, &[2, 0, 1])?;
    let w = attention_weights(tape, q, k, b, mask)?;
    let o = tape.matmul(w, v)?;
    let o = tape.permute(o, &[1, 0, 2])?;
    let o = tape.reshape(o, &[l, shape.dim])?;
    let o = nn::linear(tape, store, &format!("{prefix}.o"), o)?;
    let c = tape.add(h, o)?;
    let y = nn::layer_norm(tape, store, &format!("{prefix}.ln2"), c)?;
    let y = nn::mlp(tape, store, &format!("{prefix}.mlp"), y)?;
    Ok(tape.add(c, y)?)
}
