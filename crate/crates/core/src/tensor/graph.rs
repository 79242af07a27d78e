use super::{gemm, numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Repeat {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mse {
        pred: Var,
        target: Var,
        mask: Option<Vec<bool>>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear tape of differentiable operations.
///
/// Every op appends one node whose inputs are already on the tape, so tape
/// order is a topological order. [`Graph::backward`] walks it in exact
/// reverse, which makes gradients bitwise reproducible for a fixed op order.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of leaf values that were created with `requires_grad`.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// 0.5·(1 + tanh z) is evaluated as the logistic of 2z; exp is far cheaper than tanh.
fn gelu_gate<T: Scalar>(x: T) -> T {
    let z = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::one() / (T::one() + (-(z + z)).exp())
}

fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = gelu_gate(x);
    let dz = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    s + T::of(2.0) * x * s * (T::one() - s) * dz
}

/// Logistic function kept strictly inside (0, 1): saturated values are pinned
/// to the nearest representable neighbours of 0 and 1.
fn sigmoid<T: Scalar>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::of(2.0);
    y.max(T::min_positive_value()).min(hi)
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input value. Gradients are produced for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// `a · b` with `a: [.., m, k]` and `b: [k, n]` (shared across the batch)
    /// or `b: [.., k, n]` with the same leading extents as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` stored as `[.., n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_dims(&self, a: Var, b: Var, trans_b: bool) -> Result<MatDims> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape("matmul", format!("inner extents {sa:?} x {sb:?}")));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if !shared_b && lead_a != lead_b {
            return Err(Error::shape("matmul", format!("batch extents {sa:?} x {sb:?}")));
        }
        let mut out = lead_a.to_vec();
        out.extend([m, n]);
        Ok(MatDims {
            batch: numel(lead_a),
            m,
            k,
            n,
            shared_b,
            out,
        })
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let d = self.matmul_dims(a, b, trans_b)?;
        let mut out = vec![T::zero(); numel(&d.out)];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            if d.shared_b {
                gemm(d.batch * d.m, d.k, d.n, av, false, bv, trans_b, &mut out, false);
            } else {
                let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
                for i in 0..d.batch {
                    gemm(
                        d.m,
                        d.k,
                        d.n,
                        &av[i * sa..(i + 1) * sa],
                        false,
                        &bv[i * sb..(i + 1) * sb],
                        trans_b,
                        &mut out[i * so..(i + 1) * so],
                        false,
                    );
                }
            }
        }
        let value = Tensor::new(d.out, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.value(a).zip_map(self.value(b), op, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a` (bias
    /// vectors, positional tables).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_suffix", format!("{sa:?} + {sb:?}")));
        }
        let inner = self.value(b).len();
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        if inner > 0 {
            for chunk in v.data_mut().chunks_exact_mut(inner) {
                for (x, &y) in chunk.iter_mut().zip(&bv) {
                    *x = *x + y;
                }
            }
        }
        Ok(self.push(v, Op::AddSuffix(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().ok_or_else(|| Error::shape("softmax", "rank 0"))?;
        if d == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut v = x.clone();
        for row in v.data_mut().chunks_exact_mut(d) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total = total + *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        Ok(self.push(v, Op::Softmax(a), &[a]))
    }

    /// Layer norm over the last axis with per-channel gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x);
        let d = *xs.last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {xs:?}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / d;
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(eps);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(perm)?;
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(v, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = self.shape(x).get(axis).copied().ok_or(Error::InvalidAxis {
            axis,
            rank: self.shape(x).len(),
        })?;
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::shape("split", format!("sizes {sizes:?} vs extent {extent}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table {ts:?}")));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("id {bad} >= {rows}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Repeats an extent-1 axis `n` times.
    pub fn repeat(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::InvalidAxis { axis, rank: s.len() });
        }
        if s[axis] != 1 {
            return Err(Error::shape("repeat", format!("axis {axis} of {s:?} is not 1")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&xv[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s;
        shape[axis] = n;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Repeat { x, axis }, &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Mean squared difference over elements where `mask` is non-zero (all
    /// elements when `mask` is `None`).
    pub fn mse(&mut self, pred: Var, target: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        self.value(pred).expect_same_shape(self.value(target), "mse")?;
        let mask = match mask {
            Some(m) => {
                m.expect_same_shape(self.value(pred), "mse mask")?;
                if m.data().iter().any(|&v| v != T::zero() && v != T::one()) {
                    return Err(Error::Domain("mse mask must be binary".into()));
                }
                Some(m.data().iter().map(|&v| v == T::one()).collect::<Vec<_>>())
            }
            None => None,
        };
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let count = mask.as_ref().map_or(p.len(), |m| m.iter().filter(|&&b| b).count());
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let mut total = T::zero();
        for i in 0..p.len() {
            if mask.as_ref().is_none_or(|m| m[i]) {
                let d = p[i] - t[i];
                total = total + d * d;
            }
        }
        let v = Tensor::scalar(total / T::of(count as f64));
        Ok(self.push(
            v,
            Op::Mse {
                pred,
                target,
                mask,
                count,
            },
            &[pred, target],
        ))
    }

    /// Reverse sweep from a scalar `loss`, visiting the tape in exact reverse
    /// order. Returns gradients for every `requires_grad` leaf reachable from
    /// the loss; unreachable leaves get no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::DisconnectedGraph(format!("loss {:?} not on tape", loss)))?;
        if node.value.len() != 1 {
            return Err(Error::DisconnectedGraph(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(node.value.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => self.matmul_backward(*a, *b, *trans_b, &g, grads)?,
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::AddSuffix(a, b) => {
                if self.needs(*b) {
                    let inner = self.value(*b).len();
                    let mut db = vec![T::zero(); inner];
                    if inner > 0 {
                        for chunk in g.data().chunks_exact(inner) {
                            for (acc, &v) in db.iter_mut().zip(chunk) {
                                *acc = *acc + v;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, "sigmoid", |g, y| g * y * (T::one() - y))?;
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = g.zip_map(self.value(*a), "gelu", |g, x| g * gelu_grad(x))?;
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let d = *out.shape().last().unwrap_or(&1);
                let mut dx = g;
                for (gr, yr) in dx.data_mut().chunks_exact_mut(d).zip(out.data().chunks_exact(d)) {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&g, &y)| s + g * y);
                    for (gv, &y) in gr.iter_mut().zip(yr) {
                        *gv = y * (*gv - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => self.layer_norm_backward(*x, *gain, *bias, xhat, rstd, g, grads)?,
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.reshape(shape)?);
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *a, g.permute(&inv)?);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        self.accumulate(grads, p, g.narrow(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let len = g.shape()[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut dx = vec![T::zero(); numel(&xs)];
                for o in 0..outer {
                    let dst = (o * xs[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::GatherRows { table, ids } => {
                let ts = self.shape(*table).to_vec();
                let d = ts[1];
                let mut dt = vec![T::zero(); ts[0] * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] = dt[i * d + j] + g.data()[r * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(ts, dt)?);
            }
            Op::Repeat { x, axis } => {
                let xs = self.shape(*x).to_vec();
                let n = g.shape()[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut dx = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for r in 0..n {
                        let src = (o * n + r) * inner;
                        for j in 0..inner {
                            dx[o * inner + j] = dx[o * inner + j] + g.data()[src + j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a).to_vec(), s));
            }
            Op::Mse {
                pred,
                target,
                mask,
                count,
            } => {
                let scale = g.item() * T::of(2.0 / *count as f64);
                let (p, t) = (self.value(*pred), self.value(*target));
                let mut d = p.sub(t)?.scale(scale);
                if let Some(m) = mask {
                    for (v, &keep) in d.data_mut().iter_mut().zip(m) {
                        if !keep {
                            *v = T::zero();
                        }
                    }
                }
                if self.needs(*target) {
                    self.accumulate(grads, *target, d.map(|v| -v));
                }
                self.accumulate(grads, *pred, d);
            }
        }
        Ok(())
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let d = self.matmul_dims(a, b, trans_b)?;
        let (av, bv, gv) = (self.value(a).data(), self.value(b).data(), g.data());
        if self.needs(a) {
            // da = g · op(b)ᵀ
            let mut da = vec![T::zero(); av.len()];
            if d.shared_b {
                gemm(d.batch * d.m, d.n, d.k, gv, false, bv, !trans_b, &mut da, false);
            } else {
                let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
                for i in 0..d.batch {
                    gemm(
                        d.m,
                        d.n,
                        d.k,
                        &gv[i * so..(i + 1) * so],
                        false,
                        &bv[i * sb..(i + 1) * sb],
                        !trans_b,
                        &mut da[i * sa..(i + 1) * sa],
                        false,
                    );
                }
            }
            self.accumulate(grads, a, Tensor::new(self.shape(a).to_vec(), da)?);
        }
        if self.needs(b) {
            // db = aᵀ · g, or gᵀ · a when b is stored transposed
            let mut db = vec![T::zero(); bv.len()];
            let (rows_a, batches) = if d.shared_b { (d.batch * d.m, 1) } else { (d.m, d.batch) };
            let (sa, sb, so) = (rows_a * d.k, d.k * d.n, rows_a * d.n);
            for i in 0..batches {
                let (ai, gi) = (&av[i * sa..(i + 1) * sa], &gv[i * so..(i + 1) * so]);
                let dbi = &mut db[i * sb..(i + 1) * sb];
                if trans_b {
                    gemm(d.n, rows_a, d.k, gi, true, ai, false, dbi, false);
                } else {
                    gemm(d.k, rows_a, d.n, ai, true, gi, false, dbi, false);
                }
            }
            self.accumulate(grads, b, Tensor::new(self.shape(b).to_vec(), db)?);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        xhat: &[T],
        rstd: &[T],
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let d = self.shape(gain)[0];
        let gv = self.value(gain).data();
        if self.needs(gain) || self.needs(bias) {
            let mut dg = vec![T::zero(); d];
            let mut db = vec![T::zero(); d];
            for (gr, hr) in g.data().chunks_exact(d).zip(xhat.chunks_exact(d)) {
                for j in 0..d {
                    dg[j] = dg[j] + gr[j] * hr[j];
                    db[j] = db[j] + gr[j];
                }
            }
            self.accumulate(grads, gain, Tensor::new(vec![d], dg)?);
            self.accumulate(grads, bias, Tensor::new(vec![d], db)?);
        }
        if self.needs(x) {
            let inv_d = T::of(1.0 / d as f64);
            let mut dx = Vec::with_capacity(g.len());
            let rows = g.data().chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd);
            for ((gr, hr), &r) in rows {
                let mut sum_dh = T::zero();
                let mut sum_dh_h = T::zero();
                for j in 0..d {
                    let dh = gr[j] * gv[j];
                    sum_dh = sum_dh + dh;
                    sum_dh_h = sum_dh_h + dh * hr[j];
                }
                for j in 0..d {
                    let dh = gr[j] * gv[j];
                    dx.push(r * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h));
                }
            }
            self.accumulate(grads, x, Tensor::new(self.shape(x).to_vec(), dx)?);
        }
        Ok(())
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    out: Vec<usize>,
}
