//! Central-difference checks (h = 1e-3) for every differentiable op, with
//! inputs drawn from [-2, 2] unless the op needs a positive domain.

use crate::error::Result;
use crate::gradcheck::{check, GradCheckReport};
use crate::params::ParamStore;
use crate::rng::{stream, uniform};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::LN_EPS;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(&'static str, Tensor)>,
    pub f: OpFn,
}

pub fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = stream(seed, &[shape.iter().product::<usize>() as u64]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * uniform(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data").with_grad()
}

/// Reduces `y` to a scalar through fixed random weights so every output
/// element carries a distinct sensitivity.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut w = rand_tensor(&shape, seed ^ 0xABCD, -1.0, 1.0);
    w.set_requires_grad(false);
    let wv = tape.leaf(w)?;
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

fn t(shape: &[usize], seed: u64) -> Tensor {
    rand_tensor(shape, seed, -2.0, 2.0)
}

fn case(name: &'static str, inputs: Vec<(&'static str, Tensor)>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, inputs, f: Box::new(f) }
}

pub fn cases() -> Vec<OpCase> {
    let mask: Vec<bool> = (0..15).map(|i| i % 4 != 1).collect();
    vec![
        case("matmul_shared", vec![("a", t(&[2, 3, 4], 1)), ("b", t(&[4, 5], 2))], |tp, v| tp.matmul(v[0], v[1])),
        case("matmul_batched", vec![("a", t(&[2, 3, 4], 3)), ("b", t(&[2, 4, 2], 4))], |tp, v| tp.matmul(v[0], v[1])),
        case("matmul_nt", vec![("a", t(&[2, 3, 4], 5)), ("b", t(&[2, 5, 4], 6))], |tp, v| tp.matmul_nt(v[0], v[1])),
        case("matmul_nt_shared", vec![("a", t(&[3, 4], 7)), ("b", t(&[5, 4], 8))], |tp, v| tp.matmul_nt(v[0], v[1])),
        case("add_bcast", vec![("a", t(&[3, 4], 10)), ("b", t(&[4], 11))], |tp, v| tp.add(v[0], v[1])),
        case("sub_bcast", vec![("a", t(&[2, 3, 4], 12)), ("b", t(&[3, 4], 13))], |tp, v| tp.sub(v[0], v[1])),
        case("mul_bcast", vec![("a", t(&[3, 4], 14)), ("b", t(&[4], 15))], |tp, v| tp.mul(v[0], v[1])),
        case("mul_same", vec![("a", t(&[5], 16)), ("b", t(&[5], 17))], |tp, v| tp.mul(v[0], v[1])),
        case("mul_bcast_last", vec![("a", t(&[2, 4, 3], 18)), ("b", t(&[2, 4], 19))], |tp, v| tp.mul_bcast_last(v[0], v[1])),
        case("scale", vec![("a", t(&[6], 20))], |tp, v| tp.scale(v[0], -1.7)),
        case("add_scalar", vec![("a", t(&[6], 21))], |tp, v| tp.add_scalar(v[0], 0.3)),
        case("tanh", vec![("a", t(&[3, 4], 22))], |tp, v| tp.tanh(v[0])),
        case("sigmoid", vec![("a", t(&[3, 4], 23))], |tp, v| tp.sigmoid(v[0])),
        case("silu", vec![("a", t(&[3, 4], 24))], |tp, v| tp.silu(v[0])),
        case("exp", vec![("a", t(&[3, 4], 25))], |tp, v| tp.exp(v[0])),
        case("square", vec![("a", t(&[3, 4], 26))], |tp, v| tp.square(v[0])),
        case("log", vec![("a", rand_tensor(&[3, 4], 27, 0.5, 2.0))], |tp, v| tp.log(v[0])),
        case("sqrt", vec![("a", rand_tensor(&[3, 4], 28, 0.5, 2.0))], |tp, v| tp.sqrt(v[0])),
        case("softmax", vec![("a", t(&[3, 5], 30))], |tp, v| tp.softmax(v[0])),
        case("masked_softmax", vec![("a", t(&[2, 3, 5], 31))], move |tp, v| tp.masked_softmax(v[0], Some(&mask))),
        case("log_softmax", vec![("a", t(&[3, 4], 32))], |tp, v| tp.log_softmax(v[0])),
        case("layer_norm", vec![("a", t(&[3, 6], 33))], |tp, v| tp.layer_norm(v[0], LN_EPS)),
        case("sum", vec![("a", t(&[3, 4], 40))], |tp, v| tp.sum(v[0])),
        case("mean", vec![("a", t(&[3, 4], 41))], |tp, v| tp.mean(v[0])),
        case("sum_axis0", vec![("a", t(&[3, 4, 2], 42))], |tp, v| tp.sum_axis(v[0], 0)),
        case("sum_axis1", vec![("a", t(&[3, 4, 2], 43))], |tp, v| tp.sum_axis(v[0], 1)),
        case("mean_axis2", vec![("a", t(&[3, 4, 2], 44))], |tp, v| tp.mean_axis(v[0], 2)),
        case("reshape", vec![("a", t(&[3, 4], 45))], |tp, v| tp.reshape(v[0], &[2, 6])),
        case("permute", vec![("a", t(&[2, 3, 4], 46))], |tp, v| tp.permute(v[0], &[1, 2, 0])),
        case("transpose", vec![("a", t(&[2, 3, 4], 47))], |tp, v| tp.transpose(v[0])),
        case("slice", vec![("a", t(&[3, 5, 2], 48))], |tp, v| tp.slice(v[0], 1, 1, 3)),
        case("concat", vec![("a", t(&[2, 3], 49)), ("b", t(&[2, 2], 50))], |tp, v| tp.concat(&[v[0], v[1]], 1)),
        case("embedding", vec![("table", t(&[5, 3], 51))], |tp, v| tp.embedding(v[0], &[4, 0, 4, 2])),
        case("chain", vec![("x", t(&[4, 3], 60)), ("w1", t(&[3, 5], 61)), ("w2", t(&[5, 2], 62))], |tp, v| {
            let h = tp.matmul(v[0], v[1])?;
            let h = tp.layer_norm(h, LN_EPS)?;
            let h = tp.tanh(h)?;
            let o = tp.matmul(h, v[2])?;
            tp.softmax(o)
        }),
    ]
}

pub fn run_case(c: &OpCase) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    for (n, t) in &c.inputs {
        store.insert(*n, t.clone());
    }
    let names: Vec<&str> = c.inputs.iter().map(|(n, _)| *n).collect();
    check(&store, STEP, 64, |tape, s| {
        let vars = names.iter().map(|n| tape.param(s, n)).collect::<Result<Vec<_>>>()?;
        let y = (c.f)(tape, &vars)?;
        project(tape, y, 17)
    })
}

/// Every case with its report, in declaration order.
pub fn op_suite() -> Result<Vec<(&'static str, GradCheckReport)>> {
    cases().iter().map(|c| Ok((c.name, run_case(c)?))).collect()
}
