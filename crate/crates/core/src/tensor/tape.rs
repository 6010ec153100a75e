//! Reverse-mode tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append a node whose inputs always precede it, so the node list is already
//! in topological order and `backward` is a single reverse sweep.

use super::gemm::{gemm, MatRef};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities with built-in derivative rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
    Cos,
    Square,
    Exp,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Cos => x.cos(),
            Activation::Square => x * x,
            Activation::Exp => x.exp(),
        }
    }

    /// Derivative given the input `x` and the output `y = apply(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Cos => -x.sin(),
            Activation::Square => 2.0 * x,
            Activation::Exp => y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Cos => "cos",
            Activation::Square => "square",
            Activation::Exp => "exp",
        }
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

/// A user-supplied pointwise function and its derivative.
#[derive(Clone, Copy, Debug)]
pub struct UnaryFn {
    pub name: &'static str,
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    AddBroadcast { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Activation { a: usize, act: Activation },
    Custom { a: usize, func: UnaryFn },
    Softmax { a: usize },
    SumAxis { a: usize, axis: usize },
    SumAll { a: usize },
    Reshape { a: usize },
    Select { a: usize, axis: usize, index: usize },
    Stack { inputs: Vec<usize>, axis: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Geometry of a (possibly batched, possibly transposed) matrix product.
#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
    /// Stored column counts of the two operands.
    a_cols: usize,
    b_cols: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
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

    /// Gradient of the last `backward` loss with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize], name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        // Nodes that cannot receive gradient keep their value but drop the op.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── primitives ──────────────────────────────────────────────────

    /// Matrix product over the last two axes, `op(a) * op(b)` where `op`
    /// transposes when the corresponding flag is set. Leading axes are batch
    /// axes; one side may be unbatched, in which case it is shared across the
    /// batch.
    pub fn matmul_ext(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let dims = matmul_dims(av.shape(), bv.shape(), ta, tb)?;
        let mut out_shape = if dims.a_batched {
            av.shape()[..av.rank() - 2].to_vec()
        } else if dims.b_batched {
            bv.shape()[..bv.rank() - 2].to_vec()
        } else {
            Vec::new()
        };
        out_shape.extend([dims.m, dims.n]);
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        matmul_forward(&dims, av.data(), bv.data(), ta, tb, &mut out);
        let value = Tensor::from_parts(out_shape, out);
        self.push(value, Op::MatMul { a: a.0, b: b.0, ta, tb }, &[a.0, b.0], "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, false)
    }

    /// `x * w^T`: applies a weight matrix stored as `(out, in)` to the last
    /// axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_ext(x, w, false, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.same_shape(a, b, "add")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0], "add")
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must be a suffix
    /// of `a`'s shape (bias over features, offsets over time steps).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if bv.rank() > av.rank() || av.shape()[av.rank() - bv.rank()..] != *bv.shape() {
            return Err(TensorError::Shape {
                op: "add_broadcast",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let bl = bv.len();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % bl])
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, Op::AddBroadcast { a: a.0, b: b.0 }, &[a.0, b.0], "add_broadcast")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.same_shape(a, b, "sub")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.same_shape(a, b, "mul")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|x| x * c).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, Op::Scale { a: a.0, c }, &[a.0], "scale")
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| act.apply(x)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, Op::Activation { a: a.0, act }, &[a.0], act.name())
    }

    /// Pointwise application of a caller-provided function and derivative.
    pub fn unary(&mut self, a: Var, func: UnaryFn) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| (func.f)(x)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, Op::Custom { a: a.0, func }, &[a.0], func.name)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        if av.rank() == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape: Vec::new(),
                reason: "needs at least one axis".into(),
            });
        }
        let width = *av.shape().last().unwrap();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(width) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, Op::Softmax { a: a.0 }, &[a.0], "softmax")
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        if axis >= av.rank() {
            return Err(TensorError::InvalidShape {
                op: "sum_axis",
                shape: av.shape().to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = split_axis(av.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = av.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::from_parts(shape, out);
        self.push(value, Op::SumAxis { a: a.0, axis }, &[a.0], "sum_axis")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a: a.0 }, &[a.0], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference between two same-shape values.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.activation(diff, Activation::Square)?;
        self.mean(sq)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.0].value.reshape(shape)?;
        self.push(value, Op::Reshape { a: a.0 }, &[a.0], "reshape")
    }

    /// Picks one index along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        if axis >= av.rank() || index >= av.shape()[axis] {
            return Err(TensorError::InvalidShape {
                op: "select",
                shape: av.shape().to_vec(),
                reason: format!("axis {axis} index {index} out of range"),
            });
        }
        let (outer, len, inner) = split_axis(av.shape(), axis);
        let d = av.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * len + index) * inner;
            out.extend_from_slice(&d[start..start + inner]);
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::from_parts(shape, out);
        self.push(value, Op::Select { a: a.0, axis, index }, &[a.0], "select")
    }

    /// Stacks same-shape values along a new axis.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "stack",
            shape: Vec::new(),
            reason: "no inputs".into(),
        })?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis > base.len() {
            return Err(TensorError::InvalidShape {
                op: "stack",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        for &v in inputs {
            if self.nodes[v.0].value.shape() != base.as_slice() {
                return Err(TensorError::Shape {
                    op: "stack",
                    lhs: base,
                    rhs: self.nodes[v.0].value.shape().to_vec(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let k = inputs.len();
        let mut out = vec![0.0; outer * k * inner];
        for (j, &v) in inputs.iter().enumerate() {
            let d = self.nodes[v.0].value.data();
            for o in 0..outer {
                out[(o * k + j) * inner..(o * k + j + 1) * inner]
                    .copy_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, k);
        let value = Tensor::from_parts(shape, out);
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push(value, Op::Stack { inputs: ids.clone(), axis }, &ids, "stack")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(&Tensor, &Tensor)> {
        self.check(a)?;
        self.check(b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(TensorError::Shape {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        Ok((av, bv))
    }

    // ── reverse sweep ───────────────────────────────────────────────

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires grad. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::from_parts(node.value.shape().to_vec(), g)))
            .collect();
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let dims = matmul_dims(val(a).shape(), val(b).shape(), ta, tb)
                    .expect("shapes validated in forward");
                if wants(a) {
                    let ga = slot(grads, a, val(a).len());
                    matmul_grad_lhs(&dims, val(b).data(), g, ta, tb, ga);
                }
                if wants(b) {
                    let gb = slot(grads, b, val(b).len());
                    matmul_grad_rhs(&dims, val(a).data(), g, ta, tb, gb);
                }
            }
            Op::Add { a, b } => {
                for &i in [a, b] {
                    if wants(i) {
                        accumulate(slot(grads, i, g.len()), g.iter().copied());
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if wants(*a) {
                    accumulate(slot(grads, *a, g.len()), g.iter().copied());
                }
                if wants(*b) {
                    let bl = val(*b).len();
                    let gb = slot(grads, *b, bl);
                    for chunk in g.chunks(bl) {
                        for (acc, v) in gb.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    accumulate(slot(grads, *a, g.len()), g.iter().copied());
                }
                if wants(*b) {
                    accumulate(slot(grads, *b, g.len()), g.iter().map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    accumulate(slot(grads, *a, g.len()), g.iter().zip(bd).map(|(g, y)| g * y));
                }
                if wants(*b) {
                    accumulate(slot(grads, *b, g.len()), g.iter().zip(ad).map(|(g, x)| g * x));
                }
            }
            Op::Scale { a, c } => {
                if wants(*a) {
                    accumulate(slot(grads, *a, g.len()), g.iter().map(|v| v * c));
                }
            }
            Op::Activation { a, act } => {
                if wants(*a) {
                    let x = val(*a).data();
                    let y = node.value.data();
                    let it = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (&x, &y))| g * act.derivative(x, y));
                    accumulate(slot(grads, *a, g.len()), it);
                }
            }
            Op::Custom { a, func } => {
                if wants(*a) {
                    let x = val(*a).data();
                    let it = g.iter().zip(x).map(|(g, &x)| g * (func.df)(x));
                    accumulate(slot(grads, *a, g.len()), it);
                }
            }
            Op::Softmax { a } => {
                if wants(*a) {
                    let y = node.value.data();
                    let width = *node.value.shape().last().unwrap();
                    let ga = slot(grads, *a, g.len());
                    for ((gr, yr), out) in g
                        .chunks(width)
                        .zip(y.chunks(width))
                        .zip(ga.chunks_mut(width))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                            *o += y * (g - dot);
                        }
                    }
                }
            }
            Op::SumAxis { a, axis } => {
                if wants(*a) {
                    let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
                    let ga = slot(grads, *a, outer * len * inner);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (acc, v) in dst.iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if wants(*a) {
                    let n = val(*a).len();
                    let g0 = g[0];
                    accumulate(slot(grads, *a, n), std::iter::repeat(g0).take(n));
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    accumulate(slot(grads, *a, g.len()), g.iter().copied());
                }
            }
            Op::Select { a, axis, index } => {
                if wants(*a) {
                    let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
                    let ga = slot(grads, *a, outer * len * inner);
                    for o in 0..outer {
                        let start = (o * len + index) * inner;
                        for (acc, v) in ga[start..start + inner]
                            .iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                        {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Stack { inputs, axis } => {
                let base = val(inputs[0]).shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[*axis..].iter().product();
                let k = inputs.len();
                for (j, &i) in inputs.iter().enumerate() {
                    if !wants(i) {
                        continue;
                    }
                    let gi = slot(grads, i, outer * inner);
                    for o in 0..outer {
                        for (acc, v) in gi[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(&g[(o * k + j) * inner..(o * k + j + 1) * inner])
                        {
                            *acc += v;
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f64], src: impl Iterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatMulDims> {
    let err = || TensorError::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (ar, br) = (a.len(), b.len());
    let (m, ka) = if ta { (a[ar - 1], a[ar - 2]) } else { (a[ar - 2], a[ar - 1]) };
    let (kb, n) = if tb { (b[br - 1], b[br - 2]) } else { (b[br - 2], b[br - 1]) };
    if ka != kb {
        return Err(err());
    }
    let (ba, bb) = (&a[..ar - 2], &b[..br - 2]);
    let a_batched = !ba.is_empty();
    let b_batched = !bb.is_empty();
    if a_batched && b_batched && ba != bb {
        return Err(err());
    }
    let batch = if a_batched {
        ba.iter().product()
    } else {
        bb.iter().product()
    };
    Ok(MatMulDims {
        batch,
        a_batched,
        b_batched,
        m,
        k: ka,
        n,
        a_cols: a[ar - 1],
        b_cols: b[br - 1],
    })
}

fn matmul_forward(d: &MatMulDims, a: &[f64], b: &[f64], ta: bool, tb: bool, out: &mut [f64]) {
    let (m, k, n) = (d.m, d.k, d.n);
    if d.a_batched && !d.b_batched && !ta {
        // Rows of every batch item are contiguous: one tall product.
        gemm(
            d.batch * m,
            k,
            n,
            1.0,
            MatRef::row_major(a, k),
            MatRef::with_transpose(b, d.b_cols, tb),
            0.0,
            out,
            n,
        );
        return;
    }
    for i in 0..d.batch {
        let ao = if d.a_batched { i * m * k } else { 0 };
        let bo = if d.b_batched { i * k * n } else { 0 };
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::with_transpose(&a[ao..ao + m * k], d.a_cols, ta),
            MatRef::with_transpose(&b[bo..bo + k * n], d.b_cols, tb),
            0.0,
            &mut out[i * m * n..(i + 1) * m * n],
            n,
        );
    }
}

/// Accumulates d(loss)/d(a) into `ga` (stored layout of `a`).
fn matmul_grad_lhs(d: &MatMulDims, b: &[f64], g: &[f64], ta: bool, tb: bool, ga: &mut [f64]) {
    let (m, k, n) = (d.m, d.k, d.n);
    if d.a_batched && !d.b_batched && !ta {
        // dA = dC * op(B)^T over all rows at once.
        gemm(
            d.batch * m,
            n,
            k,
            1.0,
            MatRef::row_major(g, n),
            MatRef::with_transpose(b, d.b_cols, !tb),
            1.0,
            ga,
            k,
        );
        return;
    }
    for i in 0..d.batch {
        let ao = if d.a_batched { i * m * k } else { 0 };
        let bo = if d.b_batched { i * k * n } else { 0 };
        let gc = &g[i * m * n..(i + 1) * m * n];
        let bs = &b[bo..bo + k * n];
        let dst = &mut ga[ao..ao + m * k];
        if !ta {
            // (m x n) * (n x k)
            gemm(
                m,
                n,
                k,
                1.0,
                MatRef::row_major(gc, n),
                MatRef::with_transpose(bs, d.b_cols, !tb),
                1.0,
                dst,
                k,
            );
        } else {
            // stored a is (k x m): op(B) * dC^T, (k x n) * (n x m)
            gemm(
                k,
                n,
                m,
                1.0,
                MatRef::with_transpose(bs, d.b_cols, tb),
                MatRef::transposed(gc, n),
                1.0,
                dst,
                m,
            );
        }
    }
}

/// Accumulates d(loss)/d(b) into `gb` (stored layout of `b`).
fn matmul_grad_rhs(d: &MatMulDims, a: &[f64], g: &[f64], ta: bool, tb: bool, gb: &mut [f64]) {
    let (m, k, n) = (d.m, d.k, d.n);
    if d.a_batched && !d.b_batched && !ta {
        let rows = d.batch * m;
        if !tb {
            // (k x rows) * (rows x n)
            gemm(
                k,
                rows,
                n,
                1.0,
                MatRef::transposed(a, k),
                MatRef::row_major(g, n),
                1.0,
                gb,
                n,
            );
        } else {
            // stored b is (n x k): dC^T * A, (n x rows) * (rows x k)
            gemm(
                n,
                rows,
                k,
                1.0,
                MatRef::transposed(g, n),
                MatRef::row_major(a, k),
                1.0,
                gb,
                k,
            );
        }
        return;
    }
    for i in 0..d.batch {
        let ao = if d.a_batched { i * m * k } else { 0 };
        let bo = if d.b_batched { i * k * n } else { 0 };
        let gc = &g[i * m * n..(i + 1) * m * n];
        let as_ = &a[ao..ao + m * k];
        let dst = &mut gb[bo..bo + k * n];
        if !tb {
            gemm(
                k,
                m,
                n,
                1.0,
                MatRef::with_transpose(as_, d.a_cols, !ta),
                MatRef::row_major(gc, n),
                1.0,
                dst,
                n,
            );
        } else {
            gemm(
                n,
                m,
                k,
                1.0,
                MatRef::transposed(gc, n),
                MatRef::with_transpose(as_, d.a_cols, ta),
                1.0,
                dst,
                k,
            );
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
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[0.3, -1.2, 2.0]));
        let b = tape.constant(t(&[3], &[700.3, 698.8, 702.0]));
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-12);
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[2.0]), true);
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn repeated_use_accumulates() {
        // loss = sum(x) + sum(x) + sum(3x) → grad 5
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.7, -0.1]), true);
        let a = tape.sum(x).unwrap();
        let b = tape.sum(x).unwrap();
        let x3 = tape.scale(x, 3.0).unwrap();
        let c = tape.sum(x3).unwrap();
        let ab = tape.add(a, b).unwrap();
        let l = tape.add(ab, c).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert_eq!(tape.backward(x), Err(TensorError::NotScalar(vec![2])));
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(c).unwrap();
        assert_eq!(tape.backward(s), Err(TensorError::Detached));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn batched_matmul_matches_loop() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.11).cos());
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let c = tape.matmul_ext(av, bv, false, true).unwrap();
        let c = tape.value(c);
        assert_eq!(c.shape(), &[2, 3, 5]);
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let want: f64 = (0..4).map(|k| a.get(&[bi, i, k]) * b.get(&[bi, j, k])).sum();
                    assert!((c.get(&[bi, i, j]) - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn stack_then_select_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64));
        let s = tape.stack(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(s), &[2, 2, 3]);
        let back = tape.select(s, 1, 1).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[800.0]));
        assert_eq!(
            tape.activation(x, Activation::Exp),
            Err(TensorError::NonFinite { op: "exp" })
        );
    }
}
