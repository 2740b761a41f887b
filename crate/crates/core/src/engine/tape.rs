//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. Nodes only remember
//! their inputs when at least one input requires grad, so frozen subgraphs
//! cost nothing in the backward sweep.

use std::collections::HashMap;

use super::tensor::{
    broadcast_shape, broadcast_strides, contiguous_strides, for_each_index2, gemm, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
    Softmax(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { input: Var, axis: usize },
    MeanAxis { input: Var, axis: usize },
    Im2Col { input: Var, kernel: usize, stride: usize, pad: usize },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Concat { inputs, .. } => inputs.clone(),
            Scale(a, _) | AddScalar(a) | Permute(a, _) | Reshape(a) | BroadcastTo(a) | Relu(a)
            | Gelu(a) | Sigmoid(a) | Exp(a) | Log(a) | Softplus(a) | Square(a) | Softmax(a)
            | SumAll(a) | MeanAll(a) => vec![*a],
            Slice { input, .. }
            | Clamp { input, .. }
            | LayerNorm { input, .. }
            | SumAxis { input, .. }
            | MeanAxis { input, .. }
            | Im2Col { input, .. } => vec![*input],
        }
    }
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.leaves.remove(&var)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        let value = Tensor::new(shape, data)?;
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let op = requires_grad.then_some(op);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise binary ops with broadcasting -------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (da, db) = (self.data(a), self.data(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let numel = out_shape.iter().product();
            let mut out = vec![0.0; numel];
            let (ta, tb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
            for_each_index2(&out_shape, &ta, &tb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        self.push(name, out_shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary ops ---------------------------------------------

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(name, shape, data, op)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "gelu",
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp { input: a, lo, hi })
    }

    // ---- linear algebra ------------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n]`.
    ///
    /// Either operand may be a plain matrix shared across the other's batch
    /// axes; otherwise batch axes must match exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a x transpose(b)` where `b` is `[.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatMulPlan::new(&sa, &sb, trans_b)?;
        let mut out = vec![0.0; plan.out_numel()];
        let (da, db) = (self.data(a), self.data(b));
        plan.forward(da, db, &mut out);
        self.push("matmul", plan.out_shape.clone(), out, Op::MatMul { a, b, trans_b })
    }

    // ---- shape ops -------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let data = self.data(a).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("bad permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let own = contiguous_strides(&shape);
        let strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for_each_index2(&out_shape, &strides, &strides, |o, i, _| out[o] = src[i]);
        self.push("permute", out_shape, out, Op::Permute(a, perm.to_vec()))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r} < 2")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Numpy-style broadcast (tiling) to a larger shape.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        if broadcast_shape(&src_shape, shape).as_deref() != Some(shape) {
            return Err(Error::shape(
                "broadcast_to",
                format!("{src_shape:?} -> {shape:?}"),
            ));
        }
        let strides = broadcast_strides(&src_shape, shape);
        let src = self.data(a);
        let mut out = vec![0.0; shape.iter().product()];
        for_each_index2(shape, &strides, &strides, |o, i, _| out[o] = src[i]);
        self.push("broadcast_to", shape.to_vec(), out, Op::BroadcastTo(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or(Error::Empty("concat input list"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push("concat", shape, out, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let rank = self.shape(*inputs.first().ok_or(Error::Empty("concat input list"))?).len();
        self.concat(inputs, rank.saturating_sub(1))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("slice", out_shape, out, Op::Slice { input: a, axis, start })
    }

    // ---- normalisation ------------------------------------------------------------

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push("softmax", shape, out, Op::Softmax(a))
    }

    /// Normalises the trailing axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        let mut out = self.data(a).to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push("layer_norm", shape, out, Op::LayerNorm { input: a, inv_std })
    }

    // ---- reductions ------------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push("sum", vec![], vec![s], Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = shifted_mean(self.data(a).iter().copied());
        self.push("mean", vec![], vec![m], Op::MeanAll(a))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", a, axis, true)
    }

    fn reduce_axis(&mut self, name: &'static str, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(name, format!("axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let it = (0..n).map(|j| src[(o * n + j) * inner + i]);
                out[o * inner + i] = if mean { shifted_mean(it) } else { it.sum() };
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let op = if mean { Op::MeanAxis { input: a, axis } } else { Op::SumAxis { input: a, axis } };
        self.push(name, out_shape, out, op)
    }

    // ---- convolution support ---------------------------------------------------------

    /// Unfolds square patches of an NHWC tensor into `[B, Ho, Wo, k*k*C]`,
    /// ordered (kernel row, kernel col, channel). Padding is zero.
    pub fn im2col(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let geom = ConvGeom::new(&shape, kernel, stride, pad)?;
        let src = self.data(a);
        let mut out = vec![0.0; geom.out_numel()];
        geom.for_each(|o, i| out[o] = src[i]);
        self.push(
            "im2col",
            vec![geom.b, geom.ho, geom.wo, kernel * kernel * geom.c],
            out,
            Op::Im2Col { input: a, kernel, stride, pad },
        )
    }

    // ---- reverse sweep ---------------------------------------------------------------

    /// Back-propagates from a scalar loss, consuming the tape.
    ///
    /// Every tracked leaf gets an entry, zero-filled when the loss does not
    /// reach it.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        let loss_node = &nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NotScalar(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(Error::NotTracked);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for i in (0..nodes.len()).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = grads[i].take();
            match &node.op {
                None => {
                    let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    leaves.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Some(op) => {
                    if let Some(g) = g {
                        backprop(op, &g, node, &nodes, &mut grads);
                    }
                }
            }
        }
        Ok(Gradients { leaves })
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

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean computed as `x0 + mean(x - x0)`, exact when all inputs are equal.
fn shifted_mean(mut it: impl Iterator<Item = f64>) -> f64 {
    let Some(first) = it.next() else { return 0.0 };
    let (mut acc, mut n) = (0.0, 1usize);
    for v in it {
        acc += v - first;
        n += 1;
    }
    first + acc / n as f64
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

fn reduce_to(g: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let strides = broadcast_strides(in_shape, out_shape);
    let mut r = vec![0.0; in_shape.iter().product()];
    for_each_index2(out_shape, &strides, &strides, |o, i, _| r[i] += g[o]);
    r
}

fn backprop(op: &Op, g: &[f64], node: &Node, nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let rg = |v: &Var| nodes[v.0].requires_grad;
    let val = |v: &Var| nodes[v.0].value.data();
    let shp = |v: &Var| nodes[v.0].value.shape();
    let out = node.value.data();
    let out_shape = node.value.shape();

    // Local derivative for unary ops, chained with the upstream gradient.
    let unary = |a: &Var, grads: &mut [Option<Vec<f64>>], d: &dyn Fn(f64, f64) -> f64| {
        if rg(a) {
            let x = val(a);
            let contrib = g.iter().zip(x).zip(out).map(|((&g, &x), &y)| g * d(x, y)).collect();
            accumulate(&mut grads[a.0], contrib);
        }
    };

    match op {
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if rg(a) {
                accumulate(&mut grads[a.0], reduce_to(g, out_shape, shp(a)));
            }
            if rg(b) {
                let mut r = reduce_to(g, out_shape, shp(b));
                if sign < 0.0 {
                    r.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(&mut grads[b.0], r);
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(op, Op::Div(..));
            let (da, db) = (val(a), val(b));
            let (sa, sb) = (broadcast_strides(shp(a), out_shape), broadcast_strides(shp(b), out_shape));
            let mut ga = rg(a).then(|| vec![0.0; da.len()]);
            let mut gb = rg(b).then(|| vec![0.0; db.len()]);
            for_each_index2(out_shape, &sa, &sb, |o, ia, ib| {
                if is_div {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g[o] / db[ib];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] -= g[o] * da[ia] / (db[ib] * db[ib]);
                    }
                } else {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g[o] * db[ib];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += g[o] * da[ia];
                    }
                }
            });
            if let Some(ga) = ga {
                accumulate(&mut grads[a.0], ga);
            }
            if let Some(gb) = gb {
                accumulate(&mut grads[b.0], gb);
            }
        }
        Op::Scale(a, f) => unary(a, grads, &|_, _| *f),
        Op::AddScalar(a) => unary(a, grads, &|_, _| 1.0),
        Op::Relu(a) => unary(a, grads, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Gelu(a) => unary(a, grads, &|x, _| {
            let inner = GELU_C * (x + 0.044715 * x * x * x);
            let t = inner.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }),
        Op::Sigmoid(a) => unary(a, grads, &|_, y| y * (1.0 - y)),
        Op::Exp(a) => unary(a, grads, &|_, y| y),
        Op::Log(a) => unary(a, grads, &|x, _| 1.0 / x),
        Op::Softplus(a) => unary(a, grads, &|x, _| sigmoid(x)),
        Op::Square(a) => unary(a, grads, &|x, _| 2.0 * x),
        Op::Clamp { input, lo, hi } => {
            unary(input, grads, &|x, _| if x >= *lo && x <= *hi { 1.0 } else { 0.0 })
        }
        Op::MatMul { a, b, trans_b } => {
            let plan = MatMulPlan::new(shp(a), shp(b), *trans_b).expect("validated in forward");
            let ga = rg(a).then(|| plan.grad_a(g, val(b)));
            let gb = rg(b).then(|| plan.grad_b(g, val(a)));
            if let Some(ga) = ga {
                accumulate(&mut grads[a.0], ga);
            }
            if let Some(gb) = gb {
                accumulate(&mut grads[b.0], gb);
            }
        }
        Op::Permute(a, perm) => {
            if rg(a) {
                let own = contiguous_strides(shp(a));
                let strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
                let mut r = vec![0.0; g.len()];
                for_each_index2(out_shape, &strides, &strides, |o, i, _| r[i] = g[o]);
                accumulate(&mut grads[a.0], r);
            }
        }
        Op::Reshape(a) => {
            if rg(a) {
                accumulate(&mut grads[a.0], g.to_vec());
            }
        }
        Op::BroadcastTo(a) => {
            if rg(a) {
                accumulate(&mut grads[a.0], reduce_to(g, out_shape, shp(a)));
            }
        }
        Op::Concat { inputs, axis } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for v in inputs {
                let chunk = shp(v)[*axis] * inner;
                if rg(v) {
                    let mut r = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        r.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    accumulate(&mut grads[v.0], r);
                }
                offset += chunk;
            }
        }
        Op::Slice { input, axis, start } => {
            if rg(input) {
                let in_shape = shp(input);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut r = vec![0.0; val(input).len()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    r[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(&mut grads[input.0], r);
            }
        }
        Op::Softmax(a) => {
            if rg(a) {
                let n = *out_shape.last().unwrap();
                let mut r = vec![0.0; g.len()];
                for ((rr, gg), yy) in r.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: f64 = gg.iter().zip(yy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        rr[j] = yy[j] * (gg[j] - dot);
                    }
                }
                accumulate(&mut grads[a.0], r);
            }
        }
        Op::LayerNorm { input, inv_std } => {
            if rg(input) {
                let n = *out_shape.last().unwrap();
                let nf = n as f64;
                let mut r = vec![0.0; g.len()];
                for (row, ((rr, gg), xh)) in r.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)).enumerate() {
                    let sum_g: f64 = gg.iter().sum();
                    let sum_gx: f64 = gg.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let inv = inv_std[row];
                    for j in 0..n {
                        rr[j] = inv / nf * (nf * gg[j] - sum_g - xh[j] * sum_gx);
                    }
                }
                accumulate(&mut grads[input.0], r);
            }
        }
        Op::SumAll(a) | Op::MeanAll(a) => {
            if rg(a) {
                let n = val(a).len();
                let scale = if matches!(op, Op::MeanAll(_)) { 1.0 / n as f64 } else { 1.0 };
                accumulate(&mut grads[a.0], vec![g[0] * scale; n]);
            }
        }
        Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
            if rg(input) {
                let in_shape = shp(input);
                let outer: usize = in_shape[..*axis].iter().product();
                let n = in_shape[*axis];
                let inner: usize = in_shape[axis + 1..].iter().product();
                let scale = if matches!(op, Op::MeanAxis { .. }) { 1.0 / n as f64 } else { 1.0 };
                let mut r = vec![0.0; val(input).len()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            r[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                accumulate(&mut grads[input.0], r);
            }
        }
        Op::Im2Col { input, kernel, stride, pad } => {
            if rg(input) {
                let geom = ConvGeom::new(shp(input), *kernel, *stride, *pad).expect("validated in forward");
                let mut r = vec![0.0; val(input).len()];
                geom.for_each(|o, i| r[i] += g[o]);
                accumulate(&mut grads[input.0], r);
            }
        }
    }
}

/// Resolved batch layout of a matrix product.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    trans_b: bool,
    out_shape: Vec<usize>,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<Self> {
        let err = || {
            Error::shape(
                "matmul",
                format!("{sa:?} x {sb:?}{}", if trans_b { "^T" } else { "" }),
            )
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(err());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (batch_dims, a_batched, b_batched) = if bb.is_empty() {
            (ba.to_vec(), !ba.is_empty(), false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else if ba == bb {
            (ba.to_vec(), true, true)
        } else {
            return Err(err());
        };
        let mut out_shape = batch_dims.clone();
        out_shape.extend([m, n]);
        Ok(MatMulPlan {
            m,
            k,
            n,
            batch: batch_dims.iter().product(),
            a_batched,
            b_batched,
            trans_b,
            out_shape,
        })
    }

    fn out_numel(&self) -> usize {
        self.batch * self.m * self.n
    }

    fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.b_batched {
            // Shared right operand: fold the batch into the rows.
            let rows = if self.a_batched { self.batch * m } else { m };
            gemm(rows, k, n, a, false, b, self.trans_b, out, 0.0);
            return;
        }
        for i in 0..self.batch {
            let ai = if self.a_batched { &a[i * m * k..(i + 1) * m * k] } else { a };
            gemm(m, k, n, ai, false, &b[i * k * n..(i + 1) * k * n], self.trans_b, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
    }

    fn grad_a(&self, g: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        // dA = dC · B^T (or dC · B when B was stored transposed)
        if !self.b_batched {
            let rows = if self.a_batched { self.batch * m } else { m };
            let mut r = vec![0.0; rows * k];
            gemm(rows, n, k, g, false, b, !self.trans_b, &mut r, 0.0);
            return r;
        }
        let mut r = vec![0.0; if self.a_batched { self.batch * m * k } else { m * k }];
        for i in 0..self.batch {
            let (dst, beta) = if self.a_batched {
                (&mut r[i * m * k..(i + 1) * m * k], 0.0)
            } else {
                (&mut r[..], if i == 0 { 0.0 } else { 1.0 })
            };
            gemm(m, n, k, &g[i * m * n..(i + 1) * m * n], false, &b[i * k * n..(i + 1) * k * n], !self.trans_b, dst, beta);
        }
        r
    }

    fn grad_b(&self, g: &[f64], a: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        // dB = A^T · dC, or dC^T · A for a transposed B.
        let one = |a: &[f64], g: &[f64], rows: usize, dst: &mut [f64], beta: f64| {
            if self.trans_b {
                gemm(n, rows, k, g, true, a, false, dst, beta);
            } else {
                gemm(k, rows, n, a, true, g, false, dst, beta);
            }
        };
        if !self.b_batched {
            let rows = if self.a_batched { self.batch * m } else { m };
            let mut r = vec![0.0; k * n];
            one(a, g, rows, &mut r, 0.0);
            return r;
        }
        let mut r = vec![0.0; self.batch * k * n];
        for i in 0..self.batch {
            let ai = if self.a_batched { &a[i * m * k..(i + 1) * m * k] } else { a };
            one(ai, &g[i * m * n..(i + 1) * m * n], m, &mut r[i * k * n..(i + 1) * k * n], 0.0);
        }
        r
    }
}

struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(shape: &[usize], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if shape.len() != 4 || kernel == 0 || stride == 0 {
            return Err(Error::shape("im2col", format!("input {shape:?}, kernel {kernel}, stride {stride}")));
        }
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::shape("im2col", format!("kernel {kernel} larger than padded input {shape:?}")));
        }
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        Ok(ConvGeom { b, h, w, c, ho, wo, kernel, stride, pad })
    }

    fn out_numel(&self) -> usize {
        self.b * self.ho * self.wo * self.kernel * self.kernel * self.c
    }

    /// Calls `f(out_offset, in_offset)` for every in-bounds tap.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let kk = self.kernel * self.kernel * self.c;
        for bi in 0..self.b {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let obase = ((bi * self.ho + oy) * self.wo + ox) * kk;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let ibase = ((bi * self.h + iy as usize) * self.w + ix as usize) * self.c;
                            let o = obase + (ky * self.kernel + kx) * self.c;
                            for ci in 0..self.c {
                                f(o + ci, ibase + ci);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let a_val = t(&[3, 2], &[1.5, -2.0, 0.25, 4.0, 3.0, 7.0]);
        let a = tape.constant(a_val.clone());
        let y = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(y), &a_val);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let zero = tape.scale(x, 0.0).unwrap();
        let y = tape.add(zero, c).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn unreached_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_untracked() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::NotTracked)));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let c = tape.constant(Tensor::zeros(vec![4]));
        let err = tape.add(a, c).unwrap_err();
        assert!(err.to_string().contains("add") && err.to_string().contains("[4]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[0.0]));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn tile_then_mean_recovers_input_exactly() {
        let mut tape = Tape::new();
        let x_val = t(&[2, 3], &[0.1, -0.7, 1.0 / 3.0, 2.5e-7, 9.9, -3.3]);
        let x = tape.constant(x_val.clone());
        let r = tape.reshape(x, &[2, 1, 3]).unwrap();
        let tiled = tape.broadcast_to(r, &[2, 7, 3]).unwrap();
        let back = tape.mean_axis(tiled, 1).unwrap();
        assert_eq!(tape.value(back), &x_val);
    }

    #[test]
    fn im2col_matches_manual_patches() {
        let mut tape = Tape::new();
        // 1x4x4x1 image with values 0..16
        let x = tape.constant(Tensor::from_fn(vec![1, 4, 4, 1], |i| i as f64));
        let cols = tape.im2col(x, 2, 2, 0).unwrap();
        assert_eq!(tape.shape(cols), &[1, 2, 2, 4]);
        assert_eq!(&tape.value(cols).data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&tape.value(cols).data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    }
}
