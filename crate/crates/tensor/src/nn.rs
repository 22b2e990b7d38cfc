//! Parameter initialisation and the small layers every network here is
//! assembled from. Parameters live in a [`ParamStore`] under dotted names.

use rand::Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::uniform;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::LN_EPS;

/// Uniform(-1/√fan_in, 1/√fan_in) weight `[fan_in, fan_out]` and zero bias.
pub fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out).map(|_| (2.0 * uniform(rng) - 1.0) * bound).collect();
    store.insert(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).unwrap().with_grad());
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]).with_grad());
    }
}

/// Same as [`init_linear`] with weights scaled by `gain`.
pub fn init_linear_scaled<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    gain: f64,
    rng: &mut R,
) {
    init_linear(store, name, fan_in, fan_out, bias, rng);
    let w = store.get_mut(&format!("{name}.w")).unwrap();
    w.data_mut().iter_mut().for_each(|v| *v *= gain);
}

pub fn init_embedding<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) {
    let data: Vec<f64> = (0..vocab * dim).map(|_| crate::rng::normal(rng) * 0.1).collect();
    store.insert(format!("{name}.table"), Tensor::new(vec![vocab, dim], data).unwrap().with_grad());
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::full(&[dim], 1.0).with_grad());
    store.insert(format!("{name}.b"), Tensor::zeros(&[dim]).with_grad());
}

/// Two-layer perceptron `in → hidden → out` with a SiLU in between.
pub fn init_mlp<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, hidden: usize, fan_out: usize, rng: &mut R) {
    init_linear(store, &format!("{name}.l1"), fan_in, hidden, true, rng);
    init_linear(store, &format!("{name}.l2"), hidden, fan_out, true, rng);
}

/// `x · W (+ b)` over the last axis of `x`.
pub fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let y = tape.matmul(x, w)?;
    let bias_name = format!("{name}.b");
    if store.contains(&bias_name) {
        let b = tape.param(store, &bias_name)?;
        tape.add(y, b)
    } else {
        Ok(y)
    }
}

pub fn layer_norm(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let n = tape.layer_norm(x, LN_EPS)?;
    let g = tape.param(store, &format!("{name}.g"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let y = tape.mul(n, g)?;
    tape.add(y, b)
}

pub fn mlp(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, store, &format!("{name}.l1"), x)?;
    let h = tape.silu(h)?;
    linear(tape, store, &format!("{name}.l2"), h)
}

pub fn embedding(tape: &mut Tape, store: &ParamStore, name: &str, indices: &[usize]) -> Result<Var> {
    let table = tape.param(store, &format!("{name}.table"))?;
    tape.embedding(table, indices)
}
