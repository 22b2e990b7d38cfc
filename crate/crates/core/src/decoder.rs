//! Conditional vector-field network and the flow-matching loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use ribosphere_tensor::nn::{self, init_layer_norm, init_linear, init_linear_scaled, init_mlp};
use ribosphere_tensor::rng::{normal, uniform};
use ribosphere_tensor::{ParamStore, Tape, Tensor, Var};

use crate::attention::{self, BlockShape, PairConfig};
use crate::error::{Error, Result};
use crate::flow::{self, FlowField};
use crate::geometry::{self, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub pair_dim: usize,
    pub dist_bins: usize,
    pub dist_max: f64,
    pub relpos_clip: usize,
    pub mlp_factor: usize,
    pub time_freqs: usize,
    pub parametrization: Parametrization,
}

/// What the output head predicts. Both are trained with the same velocity
/// loss; `Data` predicts `x̂_1` and returns `(x̂_1 − x_t) / max(1 − t, ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parametrization {
    Velocity,
    Data,
}

/// Floor on `1 − t` when converting a data prediction into a velocity.
pub const MIN_REMAINING: f64 = 0.05;

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            hidden_dim: 512,
            heads: 8,
            pair_dim: 64,
            dist_bins: 64,
            dist_max: 40.0,
            relpos_clip: 32,
            mlp_factor: 4,
            time_freqs: 128,
            parametrization: Parametrization::Data,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.block_shape().validate()?;
        self.pair_config().validate()?;
        if self.time_freqs == 0 {
            return Err(Error::Config("time_freqs must be positive".into()));
        }
        Ok(())
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

pub const PREFIX: &str = "decoder";

/// Gain on the output projection so an untrained field starts near zero.
const OUT_GAIN: f64 = 0.1;

pub fn init_decoder<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DecoderConfig, atoms: usize, code_dim: usize, rng: &mut R) {
    let d = cfg.hidden_dim;
    init_linear(store, &format!("{PREFIX}.in"), 3 * atoms, d, true, rng);
    init_mlp(store, &format!("{PREFIX}.time"), 2 * cfg.time_freqs, d, d, rng);
    init_linear(store, &format!("{PREFIX}.cond"), code_dim, d, true, rng);
    let null: Vec<f64> = (0..d).map(|_| normal(rng) * 0.1).collect();
    store.insert(format!("{PREFIX}.null"), Tensor::new(vec![d], null).unwrap().with_grad());
    attention::init_pair_features(store, &format!("{PREFIX}.pair"), &cfg.pair_config(), rng);
    for i in 0..cfg.layers {
        attention::init_attention_block(store, &format!("{PREFIX}.layers.{i}"), cfg.block_shape(), rng);
    }
    init_layer_norm(store, &format!("{PREFIX}.out_ln"), d);
    init_linear_scaled(store, &format!("{PREFIX}.out"), d, 3 * atoms, true, OUT_GAIN, rng);
}

/// `[sin(1000 t ω_k), cos(1000 t ω_k)]` with `ω_k = 10000^(−k/F)`.
pub fn time_embedding(t: f64, freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * freqs);
    let ln = (10000f64).ln();
    let ws: Vec<f64> = (0..freqs).map(|k| (-ln * k as f64 / freqs as f64).exp()).collect();
    out.extend(ws.iter().map(|w| (1000.0 * t * w).sin()));
    out.extend(ws.iter().map(|w| (1000.0 * t * w).cos()));
    out
}

/// Inputs the network needs besides the weights.
pub struct FieldInput<'a> {
    /// Noisy normalised coordinates, residue-major `L·A` points.
    pub x_t: &'a [Point],
    pub t: f64,
    pub residues: usize,
    pub atoms: usize,
    /// Slot of the C4′ atom within a residue.
    pub anchor_slot: usize,
    /// Scale turning normalised coordinates back into Å for pair features.
    pub coord_scale: f64,
}

fn flat_points(x: &[Point]) -> Vec<f64> {
    x.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Predicted velocity `[L·A, 3]`, re-centred to zero CoM. `cond` is the
/// quantised code `[L, m]`; `None` selects the learned null embedding.
pub fn velocity(tape: &mut Tape, store: &ParamStore, cfg: &DecoderConfig, input: &FieldInput<'_>, cond: Option<Var>) -> Result<Var> {
    let (l, a) = (input.residues, input.atoms);
    if input.x_t.len() != l * a {
        return Err(Error::LengthMismatch(input.x_t.len(), l * a));
    }
    let x = tape.constant(vec![l, 3 * a], flat_points(input.x_t))?;
    let mut h = nn::linear(tape, store, &format!("{PREFIX}.in"), x)?;

    let te = tape.constant(vec![1, 2 * cfg.time_freqs], time_embedding(input.t, cfg.time_freqs))?;
    let te = nn::mlp(tape, store, &format!("{PREFIX}.time"), te)?;
    let te = tape.reshape(te, &[cfg.hidden_dim])?;
    h = tape.add(h, te)?;

    let c = match cond {
        Some(c) => nn::linear(tape, store, &format!("{PREFIX}.cond"), c)?,
        None => tape.param(store, &format!("{PREFIX}.null"))?,
    };
    h = tape.add(h, c)?;

    let anchors: Vec<Point> = (0..l).map(|i| geometry::scale(input.x_t[i * a + input.anchor_slot], input.coord_scale)).collect();
    let pair = attention::pair_features(tape, store, &format!("{PREFIX}.pair"), &anchors, &vec![true; l], &cfg.pair_config())?;
    for i in 0..cfg.layers {
        h = attention::attention_block(tape, store, &format!("{PREFIX}.layers.{i}"), h, pair, cfg.block_shape(), None)?;
    }
    let h = nn::layer_norm(tape, store, &format!("{PREFIX}.out_ln"), h)?;
    let v = nn::linear(tape, store, &format!("{PREFIX}.out"), h)?;
    let v = tape.reshape(v, &[l * a, 3])?;
    let com = tape.mean_axis(v, 0)?;
    let v = tape.sub(v, com)?;
    match cfg.parametrization {
        Parametrization::Velocity => Ok(v),
        Parametrization::Data => {
            let x = tape.constant(vec![l * a, 3], flat_points(input.x_t))?;
            let d = tape.sub(v, x)?;
            Ok(tape.scale(d, 1.0 / (1.0 - input.t).max(MIN_REMAINING))?)
        }
    }
}

/// One training example for the flow loss, in normalised coordinates.
pub struct FlowExample<'a> {
    /// Data coordinates `x_1` (zero-CoM), residue-major.
    pub x1: &'a [Point],
    pub mask: &'a [bool],
    pub residues: usize,
    pub atoms: usize,
    pub anchor_slot: usize,
    pub coord_scale: f64,
}

/// Mean over unmasked atoms of `‖v(x_t, t, ĉ) − (x_1 − x_0)‖²`.
///
/// With probability `cond_drop` the whole structure is conditioned on the
/// null embedding instead of `cond`.
pub fn flow_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &DecoderConfig,
    ex: &FlowExample<'_>,
    cond: Var,
    cond_drop: f64,
    rng: &mut R,
) -> Result<Var> {
    let n = ex.x1.len();
    let observed = ex.mask.iter().filter(|m| **m).count();
    if n == 0 || observed == 0 {
        return Err(Error::Invalid("flow loss on an empty example".into()));
    }
    let t = uniform(rng);
    let x0 = flow::sample_noise_zero_com(n, rng);
    let drop = uniform(rng) < cond_drop;
    let x_t = flow::interpolate(ex.x1, &x0, t)?;
    let target: Vec<f64> = ex.x1.iter().zip(&x0).flat_map(|(a, b)| (0..3).map(move |k| a[k] - b[k])).collect();
    let input = FieldInput {
        x_t: &x_t,
        t,
        residues: ex.residues,
        atoms: ex.atoms,
        anchor_slot: ex.anchor_slot,
        coord_scale: ex.coord_scale,
    };
    let v = velocity(tape, store, cfg, &input, if drop { None } else { Some(cond) })?;
    masked_mse(tape, v, target, ex.mask)
}

/// `Σ_{unmasked i} ‖v_i − u_i‖² / #unmasked` for `v` of shape `[N, 3]`.
pub fn masked_mse(tape: &mut Tape, v: Var, target: Vec<f64>, mask: &[bool]) -> Result<Var> {
    let n = mask.len();
    let observed = mask.iter().filter(|m| **m).count();
    if observed == 0 {
        return Err(Error::Invalid("every atom is masked".into()));
    }
    let u = tape.constant(vec![n, 3], target)?;
    let d = tape.sub(v, u)?;
    let d = tape.square(d)?;
    let w: Vec<f64> = mask.iter().flat_map(|m| [if *m { 1.0 / observed as f64 } else { 0.0 }; 3]).collect();
    let w = tape.constant(vec![n, 3], w)?;
    let d = tape.mul(d, w)?;
    Ok(tape.sum(d)?)
}

/// The trained network seen as a [`FlowField`] for one structure.
pub struct NetworkField<'a> {
    pub store: &'a ParamStore,
    pub cfg: &'a DecoderConfig,
    /// Quantised codes, row-major `L × m`.
    pub codes: &'a [f64],
    pub code_dim: usize,
    pub residues: usize,
    pub atoms: usize,
    pub anchor_slot: usize,
    pub coord_scale: f64,
}

impl FlowField for NetworkField<'_> {
    fn num_points(&self) -> usize {
        self.residues * self.atoms
    }

    fn velocity(&self, x: &[Point], t: f64, conditional: bool) -> Result<Vec<Point>> {
        let mut tape = Tape::new();
        let cond = if conditional {
            Some(tape.constant(vec![self.residues, self.code_dim], self.codes.to_vec())?)
        } else {
            None
        };
        let input = FieldInput {
            x_t: x,
            t,
            residues: self.residues,
            atoms: self.atoms,
            anchor_slot: self.anchor_slot,
            coord_scale: self.coord_scale,
        };
        let v = velocity(&mut tape, self.store, self.cfg, &input, cond)?;
        Ok(tape.value(v).chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}
