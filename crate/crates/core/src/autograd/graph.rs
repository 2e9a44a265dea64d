//! Tape of real-tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so node ids are a topological
//! order by construction; [`Graph::backward`] walks them in reverse. Complex
//! parameters are differentiated through their real and imaginary planes as
//! independent real leaves.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    Recip(Var),
    Ln(Var),
    Square(Var),
    ClampMin(Var, T),
    Sum(Var),
    Max(Var, Vec<usize>),
    Conv2d(Var, Var, ConvSpec),
    ConvT2d(Var, Var, ConvSpec),
    Dense(Var, Var),
    Reshape(Var),
    Narrow(Var, usize, usize),
    Pad(Var, usize, usize),
    Concat(Vec<Var>, usize),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Conv2d(a, b, _) | ConvT2d(a, b, _) | Dense(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | Offset(a) | Relu(a) | LeakyRelu(a, _) | Sigmoid(a) | Tanh(a) | Sqrt(a) | Recip(a)
            | Ln(a) | Square(a) | ClampMin(a, _) | Sum(a) | Max(a, _) | Reshape(a) | Narrow(a, _, _)
            | Pad(a, _, _) => vec![*a],
            Concat(xs, _) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. One graph per forward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: Shape, axis: usize) -> (usize, usize, usize) {
    let d = shape.dims();
    let outer: usize = d[..axis].iter().product();
    let inner: usize = d[axis + 1..].iter().product();
    (outer, d[axis], inner)
}

fn narrow_tensor<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let mut dims = x.dims();
    let (outer, n, inner) = split_axis(x.shape(), axis);
    dims[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::from_vec(Shape(dims), out).expect("narrow shape")
}

fn pad_tensor<T: Real>(x: &Tensor<T>, axis: usize, before: usize, after: usize) -> Tensor<T> {
    let mut dims = x.dims();
    let (outer, n, inner) = split_axis(x.shape(), axis);
    dims[axis] = n + before + after;
    let mut out = Tensor::zeros(Shape(dims));
    let total = dims[axis];
    let od = out.data_mut();
    for o in 0..outer {
        let dst = (o * total + before) * inner;
        od[dst..dst + n * inner].copy_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
    }
    out
}

/// Elementwise binary op with broadcasting over size-1 axes.
fn broadcast_zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = Shape::broadcast(a.shape(), b.shape())
        .ok_or_else(|| Error::dim("broadcast", format!("{} vs {}", a.shape(), b.shape())))?;
    let sa = broadcast_strides(a.shape());
    let sb = broadcast_strides(b.shape());
    let [n0, n1, n2, n3] = shape.dims();
    let mut out = Vec::with_capacity(shape.numel());
    let (ad, bd) = (a.data(), b.data());
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let oa = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let ob = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..n3 {
                    out.push(f(ad[oa + i3 * sa[3]], bd[ob + i3 * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// Row-major strides with zero stride on size-1 axes.
fn broadcast_strides(shape: Shape) -> [usize; 4] {
    let mut s = shape.strides();
    for (ax, st) in s.iter_mut().enumerate() {
        if shape.dims()[ax] == 1 {
            *st = 0;
        }
    }
    s
}

/// Sums `g` down to `shape` (the inverse of broadcasting).
fn reduce_to<T: Real>(g: &Tensor<T>, shape: Shape) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mask = [0, 1, 2, 3].map(|ax| shape.dims()[ax] == 1 && g.dims()[ax] != 1);
    sum_axes(g, mask)
}

fn reduced_shape(shape: Shape, mask: [bool; 4]) -> Shape {
    let mut d = shape.dims();
    for ax in 0..4 {
        if mask[ax] {
            d[ax] = 1;
        }
    }
    Shape(d)
}

fn sum_axes<T: Real>(x: &Tensor<T>, mask: [bool; 4]) -> Tensor<T> {
    let oshape = reduced_shape(x.shape(), mask);
    let so = broadcast_strides(oshape);
    let mut out = Tensor::zeros(oshape);
    let [n0, n1, n2, n3] = x.dims();
    let xd = x.data();
    let od = out.data_mut();
    let mut k = 0;
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let base = i0 * so[0] + i1 * so[1] + i2 * so[2];
                for i3 in 0..n3 {
                    od[base + i3 * so[3]] += xd[k];
                    k += 1;
                }
            }
        }
    }
    out
}

/// Copies `g` (reduced shape) back over `shape`.
fn expand_to<T: Real>(g: &Tensor<T>, shape: Shape) -> Tensor<T> {
    let so = broadcast_strides(g.shape());
    let [n0, n1, n2, n3] = shape.dims();
    let gd = g.data();
    let mut out = Vec::with_capacity(shape.numel());
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let base = i0 * so[0] + i1 * so[1] + i2 * so[2];
                for i3 in 0..n3 {
                    out.push(gd[base + i3 * so[3]]);
                }
            }
        }
    }
    Tensor::from_vec(shape, out).expect("expand shape")
}

/// Max over masked axes; ties resolve to the first element in row-major order.
fn max_axes<T: Real>(x: &Tensor<T>, mask: [bool; 4]) -> (Tensor<T>, Vec<usize>) {
    let oshape = reduced_shape(x.shape(), mask);
    let so = broadcast_strides(oshape);
    let mut out = Tensor::zeros(oshape);
    let mut arg = vec![usize::MAX; oshape.numel()];
    let [n0, n1, n2, n3] = x.dims();
    let xd = x.data();
    let od = out.data_mut();
    let mut k = 0;
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let base = i0 * so[0] + i1 * so[1] + i2 * so[2];
                for i3 in 0..n3 {
                    let o = base + i3 * so[3];
                    if arg[o] == usize::MAX || xd[k] > od[o] {
                        od[o] = xd[k];
                        arg[o] = k;
                    }
                    k += 1;
                }
            }
        }
    }
    (out, arg)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a trainable parameter plane).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf (data, fixed kernels).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(value, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.unary(a, |v| v * k, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// `a + c` for a scalar constant `c`.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |v| v + c, Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, |v| if v > T::zero() { v } else { v * slope }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, crate::ctensor::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.tanh(), Op::Tanh(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.sqrt(), Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |v| T::one() / v, Op::Recip(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.ln(), Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        self.unary(a, |v| v.max(floor), Op::ClampMin(a, floor))
    }

    /// Sum over the masked axes, keeping them with length 1.
    pub fn sum_axes(&mut self, a: Var, mask: [bool; 4]) -> Var {
        let value = sum_axes(self.value(a), mask);
        self.push(value, Op::Sum(a))
    }

    pub fn mean_axes(&mut self, a: Var, mask: [bool; 4]) -> Var {
        let d = self.shape(a).dims();
        let n: usize = (0..4).filter(|&ax| mask[ax]).map(|ax| d[ax]).product();
        let s = self.sum_axes(a, mask);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.sum_axes(a, [true; 4])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        self.mean_axes(a, [true; 4])
    }

    /// Max over the masked axes, keeping them with length 1.
    pub fn max_axes(&mut self, a: Var, mask: [bool; 4]) -> Var {
        let (value, arg) = max_axes(self.value(a), mask);
        self.push(value, Op::Max(a, arg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let value = kernels::conv2d(self.value(x), self.value(w), spec)?;
        Ok(self.push(value, Op::Conv2d(x, w, spec)))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, spec: ConvSpec, out_hw: Option<(usize, usize)>) -> Result<Var> {
        let value = kernels::conv_transpose2d(self.value(x), self.value(w), spec, out_hw)?;
        Ok(self.push(value, Op::ConvT2d(x, w, spec)))
    }

    pub fn dense(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = kernels::dense(self.value(x), self.value(w))?;
        Ok(self.push(value, Op::Dense(x, w)))
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let n = self.shape(a).dims()[axis];
        if start + len > n {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} exceeds axis {axis} of {}", start + len, self.shape(a)),
            ));
        }
        let value = narrow_tensor(self.value(a), axis, start, len);
        Ok(self.push(value, Op::Narrow(a, axis, start)))
    }

    /// Zero padding along one axis.
    pub fn pad(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Var {
        let value = pad_tensor(self.value(a), axis, before, after);
        self.push(value, Op::Pad(a, axis, before))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let mut dims = self.shape(first).dims();
        let mut total = 0;
        for &x in xs {
            let d = self.shape(x).dims();
            for ax in 0..4 {
                if ax != axis && d[ax] != dims[ax] {
                    return Err(Error::dim(
                        "concat",
                        format!("{} vs {} off axis {axis}", self.shape(first), self.shape(x)),
                    ));
                }
            }
            total += d[axis];
        }
        dims[axis] = total;
        let shape = Shape(dims);
        let (outer, _, inner) = split_axis(shape, axis);
        let mut out = Vec::with_capacity(shape.numel());
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x).dims()[axis];
                out.extend_from_slice(&self.value(x).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis)))
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for inp in node.op.inputs() {
                if inp.0 >= id {
                    return Err(Error::Tape(format!("node {id} consumes later node {}", inp.0)));
                }
            }
            let contributions = self.local_grads(id, &g)?;
            for (v, gv) in contributions {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gv),
                    slot @ None => *slot = Some(gv),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut res = Vec::new();
        let elementwise = |a: Var, f: &dyn Fn(T, T, T) -> T| -> Tensor<T> {
            // f(grad, input, output)
            let x = self.value(a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out.data())
                .map(|((&gv, &xv), &yv)| f(gv, xv, yv))
                .collect();
            Tensor::from_vec(x.shape(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    res.push((*a, reduce_to(g, self.shape(*a))));
                }
                if self.wants(*b) {
                    res.push((*b, reduce_to(g, self.shape(*b))));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    res.push((*a, reduce_to(g, self.shape(*a))));
                }
                if self.wants(*b) {
                    res.push((*b, reduce_to(&g.scale(-T::one()), self.shape(*b))));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = broadcast_zip(g, self.value(*b), |x, y| x * y)?;
                    res.push((*a, reduce_to(&ga, self.shape(*a))));
                }
                if self.wants(*b) {
                    let gb = broadcast_zip(g, self.value(*a), |x, y| x * y)?;
                    res.push((*b, reduce_to(&gb, self.shape(*b))));
                }
            }
            Op::Div(a, b) => {
                if self.wants(*a) {
                    let ga = broadcast_zip(g, self.value(*b), |x, y| x / y)?;
                    res.push((*a, reduce_to(&ga, self.shape(*a))));
                }
                if self.wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = broadcast_zip(out, self.value(*b), |y, bv| -y / bv)?;
                    let gb = broadcast_zip(g, &q, |x, y| x * y)?;
                    res.push((*b, reduce_to(&gb, self.shape(*b))));
                }
            }
            Op::Scale(a, k) => res.push((*a, g.scale(*k))),
            Op::Offset(a) => res.push((*a, g.clone())),
            Op::Relu(a) => res.push((*a, elementwise(*a, &|gv, x, _| if x > T::zero() { gv } else { T::zero() }))),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                res.push((*a, elementwise(*a, &|gv, x, _| if x > T::zero() { gv } else { gv * s })))
            }
            Op::Sigmoid(a) => res.push((*a, elementwise(*a, &|gv, _, y| gv * y * (T::one() - y)))),
            Op::Tanh(a) => res.push((*a, elementwise(*a, &|gv, _, y| gv * (T::one() - y * y)))),
            Op::Sqrt(a) => res.push((*a, elementwise(*a, &|gv, _, y| gv / (y + y)))),
            Op::Recip(a) => res.push((*a, elementwise(*a, &|gv, _, y| -gv * y * y))),
            Op::Ln(a) => res.push((*a, elementwise(*a, &|gv, x, _| gv / x))),
            Op::Square(a) => res.push((*a, elementwise(*a, &|gv, x, _| gv * (x + x)))),
            Op::ClampMin(a, floor) => {
                let f = *floor;
                res.push((*a, elementwise(*a, &|gv, x, _| if x > f { gv } else { T::zero() })))
            }
            Op::Sum(a) => res.push((*a, expand_to(g, self.shape(*a)))),
            Op::Max(a, arg) => {
                let mut ga = Tensor::zeros(self.shape(*a));
                for (o, &k) in arg.iter().enumerate() {
                    ga.data_mut()[k] += g.data()[o];
                }
                res.push((*a, ga));
            }
            Op::Conv2d(x, w, spec) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.wants(*x) {
                    let [_, _, h, wd] = xv.dims();
                    res.push((*x, kernels::conv_transpose2d(g, wv, *spec, Some((h, wd)))?));
                }
                if self.wants(*w) {
                    let [_, _, kh, kw] = wv.dims();
                    res.push((*w, kernels::conv2d_weight_grad(xv, g, *spec, (kh, kw))?));
                }
            }
            Op::ConvT2d(x, w, spec) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.wants(*x) {
                    res.push((*x, kernels::conv2d(g, wv, *spec)?));
                }
                if self.wants(*w) {
                    let [_, _, kh, kw] = wv.dims();
                    res.push((*w, kernels::conv2d_weight_grad(g, xv, *spec, (kh, kw))?));
                }
            }
            Op::Dense(x, w) => {
                let (gx, gw) = kernels::dense_grads(self.value(*x), self.value(*w), g);
                if self.wants(*x) {
                    res.push((*x, gx));
                }
                if self.wants(*w) {
                    res.push((*w, gw));
                }
            }
            Op::Reshape(a) => res.push((*a, g.clone().reshape(self.shape(*a))?)),
            Op::Narrow(a, axis, start) => {
                let n = self.shape(*a).dims()[*axis];
                let len = g.dims()[*axis];
                res.push((*a, pad_tensor(g, *axis, *start, n - start - len)));
            }
            Op::Pad(a, axis, before) => {
                let len = self.shape(*a).dims()[*axis];
                res.push((*a, narrow_tensor(g, *axis, *before, len)));
            }
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for &x in xs {
                    let len = self.shape(x).dims()[*axis];
                    if self.wants(x) {
                        res.push((x, narrow_tensor(g, *axis, start, len)));
                    }
                    start += len;
                }
            }
        }
        Ok(res)
    }
}
