//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and the indices of its
//! inputs. Nodes are appended after their inputs, so walking the list
//! backwards is a valid reverse topological order. Ops whose inputs carry no
//! gradient are stored as constants and cost nothing in the backward pass.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
        trans_b: bool,
    },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulBcastLast { a: usize, b: usize, inner: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Silu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Sqrt { a: usize },
    Square { a: usize },
    Softmax { a: usize, cols: usize },
    LogSoftmax { a: usize, cols: usize },
    LayerNorm { a: usize, cols: usize, eps: f64 },
    Sum { a: usize },
    Mean { a: usize },
    SumAxis { a: usize, outer: usize, axis_len: usize, inner: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Slice { a: usize, outer: usize, axis_len: usize, inner: usize, start: usize, len: usize },
    Concat { parts: Vec<(usize, usize)>, outer: usize, inner: usize, total: usize },
    Embedding { table: usize, indices: Rc<Vec<usize>>, dim: usize },
    RoundSte { a: usize },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
    backward_done: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[usize]) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients are tracked when the tensor requires them.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        t.check_finite("leaf")?;
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: t.into_data(),
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.leaf(Tensor::new(shape, data)?)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Result<Var> {
        self.constant(vec![1], vec![value])
    }

    /// Binds a named parameter from `store`. Repeated binds of the same name
    /// return the same handle.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_lookup.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let mut leaf = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        if t.requires_grad() {
            leaf = leaf.with_grad();
        }
        let v = self.leaf(leaf)?;
        self.params.push((name.to_string(), v));
        self.param_lookup.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("recorded shapes are valid")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(TensorError::NotScalar(n.shape.clone()));
        }
        Ok(n.data[0])
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product over the trailing two axes.
    ///
    /// `a` is `[..., m, k]`. `b` is either `[k, n]` (shared across the leading
    /// batch of `a`) or `[..., k, n]` with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the trailing two axes; `b` is `[n, k]` or `[..., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op_name = if trans_b { "matmul_nt" } else { "matmul" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(op_name, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(shape_err(op_name, &sa, &sb));
        }
        let lead_a = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && lead_a != &sb[..sb.len() - 2] {
            return Err(shape_err(op_name, &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for bi in 0..batch {
                let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                let b_s = if shared_b { &bd[..] } else { &bd[bi * k * n..(bi + 1) * k * n] };
                let c_s = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt(m, k, n, a_s, b_s, c_s);
                } else {
                    gemm_nn(m, k, n, a_s, b_s, c_s);
                }
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        self.push(
            op_name,
            shape,
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                shared_b,
                trans_b,
            },
            &[a.0, b.0],
        )
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check_suffix(op_name, a, b)?;
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let nb = bd.len();
        let out: Vec<f64> = ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect();
        let shape = self.shape(a).to_vec();
        self.push(op_name, shape, out, op, &[a.0, b.0])
    }

    /// Elementwise `a + b`; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// `out[.., k, j] = a[.., k, j] * b[.., k]`: `b` has `a`'s shape minus the
    /// last axis. Used to gate 3-vectors by per-channel scalars.
    pub fn mul_bcast_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let expected = if sa.len() > 1 { &sa[..sa.len() - 1] } else { &[1][..] };
        if sb != expected {
            return Err(shape_err("mul_bcast_last", &sa, &sb));
        }
        let inner = *sa.last().unwrap();
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let out: Vec<f64> = ad.iter().enumerate().map(|(i, &x)| x * bd[i / inner]).collect();
        self.push("mul_bcast_last", sa, out, Op::MulBcastLast { a: a.0, b: b.0, inner }, &[a.0, b.0])
    }

    fn unary(&mut self, op_name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op_name, shape, out, op, &[a.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar { a: a.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid { a: a.0 })
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, |x| x * sigmoid(x), Op::Silu { a: a.0 })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log { a: a.0 })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt { a: a.0 })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square { a: a.0 })
    }

    /// Round half to even with a straight-through (identity) gradient.
    pub fn round_ste(&mut self, a: Var) -> Result<Var> {
        self.unary("round_ste", a, f64::round_ties_even, Op::RoundSte { a: a.0 })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Softmax over the last axis where `mask[i] == false` entries receive
    /// exactly zero weight. The mask covers a trailing suffix of `a`'s
    /// elements and repeats over the leading axes.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap();
        let data = &self.nodes[a.0].data;
        if let Some(m) = mask {
            if m.is_empty() || data.len() % m.len() != 0 || m.len() % cols != 0 {
                return Err(shape_err("masked_softmax", &shape, &[m.len()]));
            }
        }
        let mut out = vec![0.0; data.len()];
        for (r, (row, orow)) in data.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m[(r * cols + j) % m.len()]);
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > max {
                    max = x;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(invalid("masked_softmax", format!("row {r} is fully masked")));
            }
            let mut total = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (x - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            orow.iter_mut().for_each(|v| *v /= total);
        }
        self.push("softmax", shape, out, Op::Softmax { a: a.0, cols }, &[a.0])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap();
        let data = &self.nodes[a.0].data;
        let mut out = vec![0.0; data.len()];
        for (row, orow) in data.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            orow.iter_mut().zip(row).for_each(|(o, x)| *o = x - lse);
        }
        self.push("log_softmax", shape, out, Op::LogSoftmax { a: a.0, cols }, &[a.0])
    }

    /// Layer normalization over the last axis (no affine parameters).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap();
        let data = &self.nodes[a.0].data;
        let mut out = vec![0.0; data.len()];
        for (row, orow) in data.chunks(cols).zip(out.chunks_mut(cols)) {
            let (mean, inv) = row_stats(row, eps);
            orow.iter_mut().zip(row).for_each(|(o, x)| *o = (x - mean) * inv);
        }
        self.push("layer_norm", shape, out, Op::LayerNorm { a: a.0, cols, eps }, &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].data.iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = &self.nodes[a.0].data;
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean { a: a.0 }, &[a.0])
    }

    /// Sums over `axis`, removing it (a 1-D input reduces to shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = &self.nodes[a.0].data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..axis_len {
                let src = &d[(o * axis_len + k) * inner..(o * axis_len + k + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        let mut new_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).cloned().collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        self.push("sum_axis", new_shape, out, Op::SumAxis { a: a.0, outer, axis_len, inner }, &[a.0])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[a.0].data.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let data = self.nodes[a.0].data.clone();
        self.push("reshape", shape.to_vec(), data, Op::Reshape { a: a.0 }, &[a.0])
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &shape, perm));
        }
        let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(&self.nodes[a.0].data, &shape, perm);
        self.push("permute", new_shape, out, Op::Permute { a: a.0, perm: perm.to_vec() }, &[a.0])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(invalid("transpose", "need at least two axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid("slice", format!("range {start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * axis_len + start) * inner..(o * axis_len + start + len) * inner]);
        }
        let mut new_shape = shape.clone();
        new_shape[axis] = len;
        self.push(
            "slice",
            new_shape,
            out,
            Op::Slice { a: a.0, outer, axis_len, inner, start, len },
            &[a.0],
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(shape_err("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let d = &self.nodes[p.0].data;
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut new_shape = base.clone();
        new_shape[axis] = total;
        let part_info: Vec<(usize, usize)> = parts.iter().zip(&lens).map(|(p, &l)| (p.0, l)).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            "concat",
            new_shape,
            out,
            Op::Concat { parts: part_info, outer, inner, total },
            &ids,
        )
    }

    /// Row lookup: `table` is `[vocab, dim]`; output is `[indices.len(), dim]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || indices.is_empty() {
            return Err(invalid("embedding", format!("table {shape:?}, {} indices", indices.len())));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(invalid("embedding", format!("index {bad} out of range for vocab {vocab}")));
        }
        let d = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&d[i * dim..(i + 1) * dim]);
        }
        self.push(
            "embedding",
            vec![indices.len(), dim],
            out,
            Op::Embedding { table: table.0, indices: Rc::new(indices.to_vec()), dim },
            &[table.0],
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                self.backprop_node(idx, &g);
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, i: usize) -> Option<&mut Vec<f64>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let n = self.nodes[i].data.len();
        Some(self.grads[i].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, batch, m, k, n, shared_b, trans_b } => {
                if self.nodes[a].requires_grad {
                    let bd = self.nodes[b].data.clone();
                    let ga = self.grad_buf(a).unwrap();
                    for bi in 0..batch {
                        let b_s = if shared_b { &bd[..] } else { &bd[bi * k * n..(bi + 1) * k * n] };
                        let g_s = &g[bi * m * n..(bi + 1) * m * n];
                        let ga_s = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            gemm_nn(m, n, k, g_s, b_s, ga_s);
                        } else {
                            gemm_nt(m, n, k, g_s, b_s, ga_s);
                        }
                    }
                }
                if self.nodes[b].requires_grad {
                    let ad = self.nodes[a].data.clone();
                    let gb = self.grad_buf(b).unwrap();
                    for bi in 0..batch {
                        let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                        let g_s = &g[bi * m * n..(bi + 1) * m * n];
                        let gb_s = if shared_b { &mut gb[..] } else { &mut gb[bi * k * n..(bi + 1) * k * n] };
                        if trans_b {
                            gemm_tn(n, m, k, g_s, a_s, gb_s);
                        } else {
                            gemm_tn(k, m, n, a_s, g_s, gb_s);
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(self.nodes[idx].op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if let Some(ga) = self.grad_buf(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.grad_buf(b) {
                    let nb = gb.len();
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % nb] += sign * gi;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a].requires_grad {
                    let bd = self.nodes[b].data.clone();
                    let nb = bd.len();
                    let ga = self.grad_buf(a).unwrap();
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i] += gi * bd[i % nb];
                    }
                }
                if self.nodes[b].requires_grad {
                    let ad = self.nodes[a].data.clone();
                    let gb = self.grad_buf(b).unwrap();
                    let nb = gb.len();
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % nb] += gi * ad[i];
                    }
                }
            }
            Op::MulBcastLast { a, b, inner } => {
                if self.nodes[a].requires_grad {
                    let bd = self.nodes[b].data.clone();
                    let ga = self.grad_buf(a).unwrap();
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i] += gi * bd[i / inner];
                    }
                }
                if self.nodes[b].requires_grad {
                    let ad = self.nodes[a].data.clone();
                    let gb = self.grad_buf(b).unwrap();
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i / inner] += gi * ad[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.grad_buf(a) {
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi);
                }
            }
            Op::AddScalar { a } | Op::RoundSte { a } | Op::Reshape { a } => {
                if let Some(ga) = self.grad_buf(a) {
                    add_into(ga, g);
                }
            }
            Op::Tanh { a } => {
                let y = self.nodes[idx].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Sigmoid { a } => {
                let y = self.nodes[idx].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Silu { a } => {
                let x = self.nodes[a].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for i in 0..g.len() {
                        let s = sigmoid(x[i]);
                        ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                    }
                }
            }
            Op::Exp { a } => {
                let y = self.nodes[idx].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log { a } => {
                let x = self.nodes[a].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
            Op::Sqrt { a } => {
                let y = self.nodes[idx].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * 0.5 / y[i];
                    }
                }
            }
            Op::Square { a } => {
                let x = self.nodes[a].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * 2.0 * x[i];
                    }
                }
            }
            Op::Softmax { a, cols } => {
                let y = self.nodes[idx].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for ((yr, gr), gar) in y.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..cols {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a, cols } => {
                let y = self.nodes[idx].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for ((yr, gr), gar) in y.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..cols {
                            gar[j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm { a, cols, eps } => {
                let x = self.nodes[a].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    let nf = cols as f64;
                    for ((xr, gr), gar) in x.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let (mean, inv) = row_stats(xr, eps);
                        let gmean = gr.iter().sum::<f64>() / nf;
                        let gx: f64 = xr.iter().zip(gr).map(|(x, g)| (x - mean) * inv * g).sum::<f64>() / nf;
                        for j in 0..cols {
                            let xhat = (xr[j] - mean) * inv;
                            gar[j] += inv * (gr[j] - gmean - xhat * gx);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.grad_buf(a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.grad_buf(a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumAxis { a, outer, axis_len, inner } => {
                if let Some(ga) = self.grad_buf(a) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..axis_len {
                            add_into(&mut ga[(o * axis_len + k) * inner..(o * axis_len + k + 1) * inner], src);
                        }
                    }
                }
            }
            Op::Permute { a, perm } => {
                let out_shape = self.nodes[idx].shape.clone();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &out_shape, &inv);
                if let Some(ga) = self.grad_buf(a) {
                    add_into(ga, &back);
                }
            }
            Op::Slice { a, outer, axis_len, inner, start, len } => {
                if let Some(ga) = self.grad_buf(a) {
                    for o in 0..outer {
                        add_into(
                            &mut ga[(o * axis_len + start) * inner..(o * axis_len + start + len) * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Concat { parts, outer, inner, total } => {
                let mut offset = 0;
                for (p, len) in parts {
                    if let Some(gp) = self.grad_buf(p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gp[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Embedding { table, indices, dim } => {
                if let Some(gt) = self.grad_buf(table) {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut gt[i * dim..(i + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
        }
    }

    /// Gradient of the loss with respect to `v` after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound trainable parameter, in bind order.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(name, v)| {
                let g = self.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; self.nodes[v.0].data.len()]);
                (name.clone(), g)
            })
            .collect()
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        if !self.backward_done {
            return Err(invalid("accumulate_into", "backward has not run"));
        }
        for (name, g) in self.param_grads() {
            store.accumulate_grad(&name, &g)?;
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
