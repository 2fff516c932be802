//! Operation recording and the reverse pass.
//!
//! Every op appends a node holding its output value. Node ids are assigned
//! in execution order, so the node list is already topologically sorted and
//! `backward` only needs one reverse sweep.

use crate::error::{dim_err, shape_err, Result, TensorError};
use crate::kernels::{self, MatView};
use crate::tensor::{numel_of, Tensor};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-supplied op: receives the upstream
/// gradient, the input values and the output value, and returns one
/// optional gradient per input.
pub type CustomBackward = Box<dyn Fn(&[f64], &[&Tensor], &Tensor) -> Vec<Option<Vec<f64>>>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Gelu(Var),
    Softplus(Var),
    Sqrt(Var),
    Ln(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Reshape(Var),
    Transpose(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Matmul(Var, Var),
    Bmm(Var, Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of executed differentiable operations.
///
/// Leaf gradients accumulate across `backward` calls until
/// [`Graph::zero_grads`] is called.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_data(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        let value = Tensor::new(shape, data)
            .expect("op produced inconsistent shape")
            .with_requires_grad(requires_grad);
        self.push(value, op)
    }

    /// Records a leaf, keeping the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.clear_grad();
        self.push(tensor, Op::Leaf)
    }

    /// Records a copy of `tensor` as a gradient-tracking leaf.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let t = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())
            .expect("valid tensor")
            .with_requires_grad(true);
        self.push(t, Op::Leaf)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Cuts the graph: the result has the same value and no history.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone().with_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    fn rg(&self, v: Var) -> bool {
        self.requires_grad(v)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let Some(out_shape) = kernels::broadcast_shape(&sa, &sb) else {
            return shape_err(name, &sa, &sb);
        };
        let ma = kernels::broadcast_map(&sa, &out_shape);
        let mb = kernels::broadcast_map(&sb, &out_shape);
        let (da, db) = (self.data(a), self.data(b));
        let n = numel_of(&out_shape);
        let data = (0..n)
            .map(|o| {
                let x = da[ma.as_ref().map_or(o, |m| m[o])];
                let y = db[mb.as_ref().map_or(o, |m| m[o])];
                f(x, y)
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_data(out_shape, data, op, rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
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

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push_data(shape, data, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    /// ln(1 + eˣ), overflow-safe.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, kernels::softplus, Op::Softplus(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push_data(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push_data(Vec::new(), vec![m], Op::Mean(x), rg)
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        let v = d.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / n;
        let rg = self.rg(x);
        self.push_data(Vec::new(), vec![v], Op::Variance(x), rg)
    }

    fn reduce_axis(&mut self, name: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(name, format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(y, v)| *y += v);
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(x);
        let op = if mean { Op::MeanAxis(x, axis) } else { Op::SumAxis(x, axis) };
        Ok(self.push_data(out_shape, out, op, rg))
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    /// Mean along `axis`, keeping it with length 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    // ---- shape ops ---------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x);
        if numel_of(shape) != numel_of(src) || shape.contains(&0) {
            return shape_err("reshape", src, shape);
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push_data(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    /// Permutes axes; output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return dim_err("transpose", format!("{perm:?} is not a permutation of the axes of {shape:?}"));
        }
        let (data, out_shape) = kernels::permute(self.data(x), &shape, perm);
        let rg = self.rg(x);
        Ok(self.push_data(out_shape, data, Op::Transpose(x, perm.to_vec()), rg))
    }

    /// Swaps the two axes of a matrix.
    pub fn t(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return dim_err("t", format!("expected a matrix, got {:?}", self.shape(x)));
        }
        self.transpose(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return dim_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", &base, s);
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let d = self.data(x);
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push_data(out_shape, data, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Takes `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            );
        }
        let (outer, alen, inner) = kernels::split_axis(&shape, axis);
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * alen + start) * inner;
            data.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push_data(out_shape, data, Op::Slice { x, axis, start }, rg))
    }

    /// Gathers entries along `axis` (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.is_empty() {
            return dim_err("index_select", format!("axis {axis} of {shape:?} with {} indices", indices.len()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return dim_err("index_select", format!("index {bad} out of range for axis {axis} of {shape:?}"));
        }
        let (outer, alen, inner) = kernels::split_axis(&shape, axis);
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let from = (o * alen + i) * inner;
                data.extend_from_slice(&d[from..from + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let rg = self.rg(x);
        let op = Op::IndexSelect {
            x,
            axis,
            indices: indices.to_vec(),
        };
        Ok(self.push_data(out_shape, data, op, rg))
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", &sa, &sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(MatView::new(self.data(a), m, k), MatView::new(self.data(b), k, n), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_data(vec![m, n], out, Op::Matmul(a, b), rg))
    }

    /// Batched matrix product of `[b,m,k]` and `[b,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("bmm", &sa, &sb);
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            kernels::gemm_acc(
                MatView::new(&da[i * m * k..(i + 1) * m * k], m, k),
                MatView::new(&db[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_data(vec![bs, m, n], out, Op::Bmm(a, b), rg))
    }

    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err("softmax", format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (d[at(a)] - max).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[at(a)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push_data(shape, out, Op::Softmax(x, axis), rg))
    }

    /// Normalizes over the last axis: (x − mean)/√(var + eps)·gamma + beta.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&d) = shape.last() else {
            return dim_err("layernorm", "input must have at least one axis");
        };
        if d == 0 {
            return dim_err("layernorm", "normalized axis has zero length");
        }
        if !(eps > 0.0) {
            return Err(TensorError::Contract(format!("layernorm eps must be positive, got {eps}")));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return shape_err("layernorm", &shape, self.shape(p));
            }
        }
        let xs = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push_data(shape, out, op, rg))
    }

    /// Records an op defined by an explicit output value and VJP.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        let value = value.with_requires_grad(rg);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    // ---- reverse pass ------------------------------------------------

    /// Back-propagates from a single-element `loss`, adding the result into
    /// the gradient buffer of every gradient-tracking leaf it reaches.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].value.requires_grad() {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                leaf_grads.push((id, g));
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        for (id, g) in leaf_grads {
            self.nodes[id].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let rg = |v: Var| self.requires_grad(v);
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    let map = kernels::broadcast_map(self.shape(*a), out.shape());
                    accumulate(grads, *a, kernels::reduce_broadcast(g, map.as_deref(), val(*a).len()));
                }
                if rg(*b) {
                    let map = kernels::broadcast_map(self.shape(*b), out.shape());
                    let mut gb = kernels::reduce_broadcast(g, map.as_deref(), val(*b).len());
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let ma = kernels::broadcast_map(self.shape(*a), out.shape());
                let mb = kernels::broadcast_map(self.shape(*b), out.shape());
                let (da, db) = (val(*a), val(*b));
                let ia = |o: usize| ma.as_ref().map_or(o, |m| m[o]);
                let ib = |o: usize| mb.as_ref().map_or(o, |m| m[o]);
                if rg(*a) {
                    let local: Vec<f64> = (0..g.len())
                        .map(|o| if is_div { g[o] / db[ib(o)] } else { g[o] * db[ib(o)] })
                        .collect();
                    accumulate(grads, *a, kernels::reduce_broadcast(&local, ma.as_deref(), da.len()));
                }
                if rg(*b) {
                    let local: Vec<f64> = (0..g.len())
                        .map(|o| {
                            if is_div {
                                let y = db[ib(o)];
                                -g[o] * da[ia(o)] / (y * y)
                            } else {
                                g[o] * da[ia(o)]
                            }
                        })
                        .collect();
                    accumulate(grads, *b, kernels::reduce_broadcast(&local, mb.as_deref(), db.len()));
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => accumulate(grads, *x, g.to_vec()),
            Op::Tanh(x) => {
                let y = out.data();
                accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Gelu(x) => {
                let xs = val(*x);
                accumulate(grads, *x, g.iter().zip(xs).map(|(g, &v)| g * kernels::gelu_grad(v)).collect());
            }
            Op::Softplus(x) => {
                let xs = val(*x);
                accumulate(grads, *x, g.iter().zip(xs).map(|(g, &v)| g * kernels::sigmoid(v)).collect());
            }
            Op::Sqrt(x) => {
                let y = out.data();
                accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect());
            }
            Op::Ln(x) => {
                let xs = val(*x);
                accumulate(grads, *x, g.iter().zip(xs).map(|(g, v)| g / v).collect());
            }
            Op::Exp(x) => {
                let y = out.data();
                accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Variance(x) => {
                let xs = val(*x);
                let n = xs.len() as f64;
                let m = xs.iter().sum::<f64>() / n;
                accumulate(grads, *x, xs.iter().map(|v| g[0] * 2.0 * (v - m) / n).collect());
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, len, inner) = kernels::split_axis(self.shape(*x), *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / len as f64 } else { 1.0 };
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * scale);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Transpose(x, perm) => {
                let (gx, _) = kernels::permute(g, out.shape(), &kernels::inverse_perm(perm));
                accumulate(grads, *x, gx);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if rg(x) {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[from..from + len * inner]);
                        }
                        accumulate(grads, x, gx);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, alen, inner) = kernels::split_axis(self.shape(*x), *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![0.0; outer * alen * inner];
                for o in 0..outer {
                    let to = (o * alen + start) * inner;
                    gx[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, gx);
            }
            Op::IndexSelect { x, axis, indices } => {
                let (outer, alen, inner) = kernels::split_axis(self.shape(*x), *axis);
                let k = indices.len();
                let mut gx = vec![0.0; outer * alen * inner];
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                        let dst = &mut gx[(o * alen + i) * inner..(o * alen + i + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_acc(MatView::new(g, m, n), MatView::new(val(*b), k, n).t(), &mut ga);
                    accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_acc(MatView::new(val(*a), m, k).t(), MatView::new(g, m, n), &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (val(*a), val(*b));
                if rg(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        kernels::gemm_acc(
                            MatView::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            MatView::new(&db[i * k * n..(i + 1) * k * n], k, n).t(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        kernels::gemm_acc(
                            MatView::new(&da[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatView::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *self.shape(*gamma).first().expect("gamma is a vector");
                let rows = xhat.len() / d;
                let gam = val(*gamma);
                if rg(*beta) {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        gb.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(b, v)| *b += v);
                    }
                    accumulate(grads, *beta, gb);
                }
                if rg(*gamma) {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if rg(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    let df = d as f64;
                    for r in 0..rows {
                        let row = r * d..(r + 1) * d;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let gh = g[r * d + j] * gam[j];
                            s1 += gh;
                            s2 += gh * xhat[r * d + j];
                        }
                        for (j, out) in gx[row].iter_mut().enumerate() {
                            let gh = g[r * d + j] * gam[j];
                            *out = inv_std[r] / df * (df * gh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gs = backward(g, &ins, out);
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        if rg(v) {
                            accumulate(grads, v, gv);
                        }
                    }
                }
            }
        }
    }
}
