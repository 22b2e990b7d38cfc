//! Dual-path geometry adapter: scalar node features from the token codes,
//! rotation-equivariant vector features from the local backbone directions.

use rand::Rng;

use ribosphere_tensor::nn::{self, init_linear, init_mlp};
use ribosphere_tensor::{ParamStore, Tape, Var};

use super::frames::K_LOCAL;
use super::InvfoldConfig;
use crate::error::{Error, Result};
use crate::geometry::{self, Point};

pub const PREFIX: &str = "invfold.adapter";
/// Optional per-residue prior channels (secondary structure, pairing);
/// zero-filled when absent.
pub const PRIOR_DIM: usize = 2;
/// Added under the square root of vector norms.
pub const NORM_EPS: f64 = 1e-8;

pub fn init_adapter<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &InvfoldConfig, code_dim: usize, rng: &mut R) {
    let (d, k) = (cfg.scalar_dim, cfg.vector_channels);
    init_linear(store, &format!("{PREFIX}.in"), code_dim + PRIOR_DIM, d, true, rng);
    init_linear(store, &format!("{PREFIX}.s"), d, d, true, rng);
    init_linear(store, &format!("{PREFIX}.v"), d, k, true, rng);
    init_linear(store, &format!("{PREFIX}.s2v"), d, k, true, rng);
    init_linear(store, &format!("{PREFIX}.mix"), K_LOCAL, k, false, rng);
    init_mlp(store, &format!("{PREFIX}.pair"), cfg.rbf_dim, cfg.rbf_dim, 1, rng);
    init_linear(store, &format!("{PREFIX}.v2s"), k, d, true, rng);
}

/// Borrowed per-structure inputs of the adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdapterInput<'a> {
    /// Row-major `L × code_dim` quantised codes.
    pub codes: &'a [f64],
    pub code_dim: usize,
    /// Row-major `L × PRIOR_DIM`.
    pub priors: Option<&'a [f64]>,
    /// Row-major `L × K_LOCAL × 3`.
    pub vectors: &'a [f64],
    pub anchors: &'a [Point],
    pub present: &'a [bool],
}

impl AdapterInput<'_> {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn check(&self) -> Result<()> {
        let l = self.len();
        let bad = |what: &str, got: usize, want: usize| Error::Invalid(format!("adapter {what}: {got} values, expected {want}"));
        if self.codes.len() != l * self.code_dim {
            return Err(bad("codes", self.codes.len(), l * self.code_dim));
        }
        if let Some(p) = self.priors {
            if p.len() != l * PRIOR_DIM {
                return Err(bad("priors", p.len(), l * PRIOR_DIM));
            }
        }
        if self.vectors.len() != l * K_LOCAL * 3 {
            return Err(bad("vectors", self.vectors.len(), l * K_LOCAL * 3));
        }
        if self.present.len() != l {
            return Err(Error::LengthMismatch(self.present.len(), l));
        }
        if l == 0 {
            return Err(Error::Invalid("adapter on an empty structure".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterOutput {
    /// `[L, d_s]`.
    pub node_s: Var,
    /// `[L, K, 3]`.
    pub node_v: Var,
    /// `[L, K]`.
    pub v_gate: Var,
}

/// Gaussian radial features of anchor distances, `L × L × rbf_dim`; pairs
/// with a missing anchor are zero.
pub fn rbf_features(anchors: &[Point], present: &[bool], rbf_dim: usize, dist_max: f64) -> Vec<f64> {
    let l = anchors.len();
    let width = dist_max / rbf_dim as f64;
    let mut out = vec![0.0; l * l * rbf_dim];
    for i in 0..l {
        for j in 0..l {
            if !(present[i] && present[j]) {
                continue;
            }
            let d = geometry::dist(anchors[i], anchors[j]);
            for r in 0..rbf_dim {
                let z = (d - r as f64 * width) / width;
                out[(i * l + j) * rbf_dim + r] = (-z * z).exp();
            }
        }
    }
    out
}

/// Causal averaging weights: `1/(i+1)` for `j <= i`, zero above the diagonal.
fn causal_average(l: usize) -> Vec<f64> {
    let mut m = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..=i {
            m[i * l + j] = 1.0 / (i + 1) as f64;
        }
    }
    m
}

/// Per-channel `sqrt(|v|² + eps)` of a `[L, K, 3]` vector tensor.
pub fn vector_norms(tape: &mut Tape, v: Var) -> Result<Var> {
    let sq = tape.square(v)?;
    let s = tape.sum_axis(sq, 2)?;
    let s = tape.add_scalar(s, NORM_EPS)?;
    Ok(tape.sqrt(s)?)
}

/// Linear map over the channel axis of `[L, K_in, 3]` with a bias-free
/// `[K_in, K_out]` weight; commutes with rotations.
pub fn mix_channels(tape: &mut Tape, store: &ParamStore, name: &str, v: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let t = tape.permute(v, &[0, 2, 1])?;
    let t = tape.matmul(t, w)?;
    Ok(tape.permute(t, &[0, 2, 1])?)
}

pub fn adapter(tape: &mut Tape, store: &ParamStore, cfg: &InvfoldConfig, input: &AdapterInput) -> Result<AdapterOutput> {
    input.check()?;
    let l = input.len();
    let k = cfg.vector_channels;
    let width = input.code_dim + PRIOR_DIM;
    let mut x = vec![0.0; l * width];
    for i in 0..l {
        x[i * width..i * width + input.code_dim].copy_from_slice(&input.codes[i * input.code_dim..(i + 1) * input.code_dim]);
        if let Some(p) = input.priors {
            x[i * width + input.code_dim..(i + 1) * width].copy_from_slice(&p[i * PRIOR_DIM..(i + 1) * PRIOR_DIM]);
        }
    }
    let x = tape.constant(vec![l, width], x)?;
    let c = nn::linear(tape, store, &format!("{PREFIX}.in"), x)?;

    let node_s = nn::linear(tape, store, &format!("{PREFIX}.s"), c)?;
    let gate_in = nn::linear(tape, store, &format!("{PREFIX}.v"), c)?;
    let v_gate = tape.tanh(gate_in)?;
    let s2v = nn::linear(tape, store, &format!("{PREFIX}.s2v"), node_s)?;
    let v_weight = tape.add(v_gate, s2v)?;
    let local = tape.constant(vec![l, K_LOCAL, 3], input.vectors.to_vec())?;
    let mixed = mix_channels(tape, store, &format!("{PREFIX}.mix"), local)?;
    let node_v = tape.mul_bcast_last(mixed, v_weight)?;

    let rbf = rbf_features(input.anchors, input.present, cfg.rbf_dim, cfg.dist_max);
    let rbf = tape.constant(vec![l, l, cfg.rbf_dim], rbf)?;
    let logits = nn::mlp(tape, store, &format!("{PREFIX}.pair"), rbf)?;
    let logits = tape.reshape(logits, &[l, l])?;
    let gate = tape.sigmoid(logits)?;
    let m = tape.constant(vec![l, l], causal_average(l))?;
    let gate = tape.mul(gate, m)?;
    let flat = tape.reshape(mixed, &[l, k * 3])?;
    let v_pair = tape.matmul(gate, flat)?;
    let v_pair = tape.reshape(v_pair, &[l, k, 3])?;
    let node_v = tape.add(node_v, v_pair)?;

    let norms = vector_norms(tape, node_v)?;
    let fb = nn::linear(tape, store, &format!("{PREFIX}.v2s"), norms)?;
    let node_s = tape.add(node_s, fb)?;
    Ok(AdapterOutput { node_s, node_v, v_gate })
}
