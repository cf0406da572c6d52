//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in a linear tape. Nodes are
//! created in topological order, so the backward pass is a single reverse
//! sweep. Leaves created with [`Graph::param`] receive gradients; leaves created
//! with [`Graph::constant`] do not, and no gradient work is done for subgraphs
//! that only depend on constants.

use super::tensor::{argmax, axis_split, Scalar, Tensor};
use super::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Powf(Var, f64),
    Matmul { a: Var, b: Var, trans_b: bool },
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, rows: Vec<usize> },
    SumAll(Var),
    Mean { x: Var, axis: usize },
    Max { x: Var, axis: usize, arg: Vec<usize> },
    Softmax { x: Var, axis: usize },
    L2Normalize(Var),
    Kl { p: Var, q: Var, eps: f64 },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Recording of a forward computation. Confined to one thread while in use.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Axis { op, axis, rank: shape.len() });
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// `x + b` with `b` broadcast over every leading index of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = *tx.shape().last().unwrap_or(&1);
        if tb.len() != n || tb.rank() != 1 {
            return Err(TensorError::shape("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let bias = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + bias[i % n]).collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_bias", v, Op::AddBias(x, b), &[x, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        let v = self.value(x).map(|a| a * k);
        self.push("scale", v, Op::Scale(x, c), &[x])
    }

    /// `x · s` for a single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(TensorError::shape("scale_by", format!("scale has shape {:?}", self.shape(s))));
        }
        let k = self.value(s).item();
        let v = self.value(x).map(|a| a * k);
        self.push("scale_by", v, Op::ScaleBy(x, s), &[x, s])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        let v = self.value(x).map(|a| a + k);
        self.push("add_scalar", v, Op::AddScalar(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::ln);
        self.push("log", v, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::exp);
        self.push("exp", v, Op::Exp(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push("relu", v, Op::Relu(x), &[x])
    }

    /// Elementwise `x^p`.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let e = T::of(p);
        let v = self.value(x).map(|a| a.powf(e));
        self.push("powf", v, Op::Powf(x, p), &[x])
    }

    /// `a × b` for `a: [m,k]`, `b: [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a × bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(TensorError::shape("matmul", "operands must be 2-D"));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if trans_b { (tb.shape()[1], tb.shape()[0]) } else { (tb.shape()[0], tb.shape()[1]) };
        if k != kb {
            return Err(TensorError::shape(
                "matmul",
                format!("{:?} x {:?}{}", ta.shape(), tb.shape(), if trans_b { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        if trans_b {
            gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        } else {
            gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        }
        let v = Tensor::new([m, n], out)?;
        self.push("matmul", v, Op::Matmul { a, b, trans_b }, &[a, b])
    }

    /// Batched product: `a: [B,m,k]` with `b: [B,k,n]` (or `[B,n,k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(TensorError::shape("bmm", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b { (tb.shape()[2], tb.shape()[1]) } else { (tb.shape()[1], tb.shape()[2]) };
        if k != kb {
            return Err(TensorError::shape("bmm", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            let (sa, sb) = (&ta.data()[i * m * k..(i + 1) * m * k], &tb.data()[i * k * n..(i + 1) * k * n]);
            let so = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(sa, sb, so, m, k, n);
            } else {
                gemm_nn(sa, sb, so, m, k, n);
            }
        }
        let v = Tensor::new([bs, m, n], out)?;
        self.push("bmm", v, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(TensorError::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        self.push("concat", v, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("slice", t.shape(), axis)?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        if len == 0 || start + len > n {
            return Err(TensorError::shape("slice", format!("{start}..{} of extent {n}", start + len)));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, data)?;
        self.push("slice", v, Op::Slice { x, axis, start }, &[x])
    }

    /// Rows `rows` (repetition allowed) of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= t.shape()[0]) {
            return Err(TensorError::shape("gather_rows", format!("{rows:?} of {:?}", t.shape())));
        }
        let mut data = Vec::with_capacity(rows.len() * t.shape()[1]);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let v = Tensor::new([rows.len(), t.shape()[1]], data)?;
        self.push("gather_rows", v, Op::Gather { x, rows: rows.to_vec() }, &[x])
    }

    /// Sum of every entry, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::SumAll(x), &[x])
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("mean", t.shape(), axis)?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let inv = T::one() / T::of(n as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &t.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + s;
                }
            }
        }
        data.iter_mut().for_each(|d| *d = *d * inv);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, data)?;
        self.push("mean", v, Op::Mean { x, axis }, &[x])
    }

    /// Maximum over `axis` (axis removed). Also returns the arg index of every
    /// output entry; the lowest index wins ties and alone receives gradient.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let t = self.value(x);
        check_axis("max", t.shape(), axis)?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        let mut column = Vec::with_capacity(n);
        for o in 0..outer {
            for j in 0..inner {
                column.clear();
                column.extend((0..n).map(|i| t.data()[(o * n + i) * inner + j]));
                let a = argmax(&column);
                arg.push(a);
                data.push(column[a]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, data)?;
        let out = self.push("max", v, Op::Max { x, axis, arg: arg.clone() }, &[x])?;
        Ok((out, arg))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("softmax", t.shape(), axis)?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let m = (0..n).map(|i| data[idx(i)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for i in 0..n {
                    let e = (data[idx(i)] - m).exp();
                    data[idx(i)] = e;
                    z = z + e;
                }
                for i in 0..n {
                    data[idx(i)] = data[idx(i)] / z;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax", v, Op::Softmax { x, axis }, &[x])
    }

    /// Unit L2 norm along the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or_else(|| TensorError::shape("l2_normalize", "rank 0"))?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let norm = row_norm(row);
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push("l2_normalize", v, Op::L2Normalize(x), &[x])
    }

    /// `Σ pᵢ ln((pᵢ+ε)/(qᵢ+ε))` for distributions `p`, `q` of equal shape.
    pub fn kl_div(&mut self, p: Var, q: Var, eps: f64) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(q));
        same_shape("kl_div", tp.shape(), tq.shape())?;
        check_distribution(tp)?;
        check_distribution(tq)?;
        let e = T::of(eps);
        let total = tp
            .data()
            .iter()
            .zip(tq.data())
            .map(|(&a, &b)| a * ((a + e) / (b + e)).ln())
            .sum();
        self.push("kl_div", Tensor::scalar(total), Op::Kl { p, q, eps }, &[p, q])
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::shape("backward", "loss must have exactly one element"));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..count).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            self.backward_node(&node.op, &node.value, &gy, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, op: &Op, y: &Tensor<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(g) = self.acc(grads, a) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, b) {
                    add_into(g, gy);
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, a) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, b) {
                    g.iter_mut().zip(gy).for_each(|(d, &s)| *d = *d - s);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                if let Some(g) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        g[i] = g[i] + gy[i] * tb[i];
                    }
                }
                if let Some(g) = self.acc(grads, b) {
                    for i in 0..g.len() {
                        g[i] = g[i] + gy[i] * ta[i];
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(g) = self.acc(grads, x) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, b) {
                    let n = g.len();
                    for (i, &s) in gy.iter().enumerate() {
                        g[i % n] = g[i % n] + s;
                    }
                }
            }
            Op::Scale(x, c) => {
                let k = T::of(c);
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().zip(gy).for_each(|(d, &s)| *d = *d + k * s);
                }
            }
            Op::ScaleBy(x, s) => {
                let k = self.value(s).item();
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().zip(gy).for_each(|(d, &v)| *d = *d + k * v);
                }
                let tx = self.value(x).data();
                if let Some(g) = self.acc(grads, s) {
                    let dot: T = tx.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    g[0] = g[0] + dot;
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(g) = self.acc(grads, x) {
                    add_into(g, gy);
                }
            }
            Op::Log(x) => {
                let tx = self.value(x).data();
                if let Some(g) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        g[i] = g[i] + gy[i] / tx[i];
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(g) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        g[i] = g[i] + gy[i] * y.data()[i];
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(g) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        let s = y.data()[i];
                        g[i] = g[i] + gy[i] * s * (T::one() - s);
                    }
                }
            }
            Op::Relu(x) => {
                let tx = self.value(x).data();
                if let Some(g) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        if tx[i] > T::zero() {
                            g[i] = g[i] + gy[i];
                        }
                    }
                }
            }
            Op::Powf(x, p) => {
                let tx = self.value(x).data();
                let (e, em1) = (T::of(p), T::of(p - 1.0));
                if let Some(g) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        g[i] = g[i] + gy[i] * e * tx[i].powf(em1);
                    }
                }
            }
            Op::Matmul { a, b, trans_b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = y.shape()[1];
                if let Some(g) = self.acc(grads, a) {
                    if trans_b {
                        gemm_nn(gy, tb.data(), g, m, n, k);
                    } else {
                        gemm_nt(gy, tb.data(), g, m, n, k);
                    }
                }
                if let Some(g) = self.acc(grads, b) {
                    if trans_b {
                        gemm_tn(gy, ta.data(), g, m, n, k);
                    } else {
                        gemm_tn(ta.data(), gy, g, m, k, n);
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = y.shape()[2];
                if let Some(g) = self.acc(grads, a) {
                    for i in 0..bs {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let tbi = &tb.data()[i * k * n..(i + 1) * k * n];
                        let gi = &mut g[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            gemm_nn(gyi, tbi, gi, m, n, k);
                        } else {
                            gemm_nt(gyi, tbi, gi, m, n, k);
                        }
                    }
                }
                if let Some(g) = self.acc(grads, b) {
                    for i in 0..bs {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let tai = &ta.data()[i * m * k..(i + 1) * m * k];
                        let gi = &mut g[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm_tn(gyi, tai, gi, m, n, k);
                        } else {
                            gemm_tn(tai, gyi, gi, m, k, n);
                        }
                    }
                }
            }
            Op::Concat { ref parts, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[axis];
                    if let Some(g) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &gy[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            add_into(&mut g[o * n * inner..(o + 1) * n * inner], src);
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                let len = y.shape()[axis];
                if let Some(g) = self.acc(grads, x) {
                    for o in 0..outer {
                        let dst = &mut g[(o * n + start) * inner..(o * n + start + len) * inner];
                        add_into(dst, &gy[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Gather { x, ref rows } => {
                let cols = self.shape(x)[1];
                if let Some(g) = self.acc(grads, x) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * cols..(r + 1) * cols], &gy[i * cols..(i + 1) * cols]);
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().for_each(|d| *d = *d + gy[0]);
                }
            }
            Op::Mean { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                let inv = T::one() / T::of(n as f64);
                if let Some(g) = self.acc(grads, x) {
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                let d = &mut g[(o * n + i) * inner + j];
                                *d = *d + gy[o * inner + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Max { x, axis, ref arg } => {
                let (_, n, inner) = axis_split(self.shape(x), axis);
                if let Some(g) = self.acc(grads, x) {
                    for (k, &a) in arg.iter().enumerate() {
                        let (o, j) = (k / inner, k % inner);
                        let d = &mut g[(o * n + a) * inner + j];
                        *d = *d + gy[k];
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(y.shape(), axis);
                if let Some(g) = self.acc(grads, x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let dot: T = (0..n).map(|i| gy[idx(i)] * y.data()[idx(i)]).sum();
                            for i in 0..n {
                                let d = &mut g[idx(i)];
                                *d = *d + y.data()[idx(i)] * (gy[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::L2Normalize(x) => {
                let n = *y.shape().last().unwrap_or(&1);
                let tx = self.value(x).data();
                if let Some(g) = self.acc(grads, x) {
                    for r in 0..y.len() / n {
                        let span = r * n..(r + 1) * n;
                        let norm = row_norm(&tx[span.clone()]);
                        let yr = &y.data()[span.clone()];
                        let gr = &gy[span.clone()];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (i, d) in g[span].iter_mut().enumerate() {
                            *d = *d + (gr[i] - yr[i] * dot) / norm;
                        }
                    }
                }
            }
            Op::Kl { p, q, eps } => {
                let e = T::of(eps);
                let (tp, tq) = (self.value(p).data(), self.value(q).data());
                if let Some(g) = self.acc(grads, p) {
                    for i in 0..g.len() {
                        let d = ((tp[i] + e) / (tq[i] + e)).ln() + tp[i] / (tp[i] + e);
                        g[i] = g[i] + gy[0] * d;
                    }
                }
                if let Some(g) = self.acc(grads, q) {
                    for i in 0..g.len() {
                        g[i] = g[i] - gy[0] * tp[i] / (tq[i] + e);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    let s: T = row.iter().map(|&v| v * v).sum();
    s.sqrt().max(T::of(1e-12))
}

fn check_distribution<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    let sum = t.sum().f64();
    if t.data().iter().any(|&v| v < T::zero()) || (sum - 1.0).abs() > 1e-4 {
        return Err(TensorError::NotDistribution { sum });
    }
    Ok(())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

/// `c[m,n] += a[m,k] · b[k,n]`
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let bj = &b[j * k..(j + 1) * k];
            let dot: T = ai.iter().zip(bj).map(|(&x, &y)| x * y).sum();
            c[i * n + j] = c[i * n + j] + dot;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let bp = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            if av == T::zero() {
                continue;
            }
            let ci = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv = *cv + av * bv;
            }
        }
    }
}
