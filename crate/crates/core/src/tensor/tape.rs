//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and enough saved state
//! for its vector-Jacobian product. `backward` walks the nodes in exact reverse
//! order and accumulates gradients additively, so fan-out is handled for free.

use super::{broadcast_index, broadcast_shape, split_axis, Tensor};
use crate::error::{contract, Error, Result};
use crate::scalar::{gemm, MatLayout, Scalar};

/// Additive pre-softmax logit applied to masked keys.
pub const MASK_LOGIT: f64 = -1e9;

/// Lower clamp applied before every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

enum Op<T> {
    Leaf,
    Neg(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Tanh(Var),
    Scale(Var, T),
    AddScalar(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, plan: MatMulPlan },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    MinAxis { x: Var, axis: usize, arg: Vec<usize> },
    Reshape(Var),
    Expand(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    SelectLast { x: Var, idx: Vec<usize> },
    SegmentSum { x: Var, seg: Vec<Option<usize>> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Option<Vec<T>> },
}

/// Ordered record of executed ops.
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient w.r.t. `var`, zero-filled when the loss does not depend on it.
    pub fn get_or_zero(&self, var: Var) -> Tensor<T> {
        self.get(var).unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }

    pub(crate) fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0)?.take()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

/// Softmax of one contiguous row, in place.
fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    for v in row.iter_mut() {
        *v -= max;
    }
    T::exp_slice(row);
    let inv = T::one() / row.iter().fold(T::zero(), |a, &v| a + v);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn softmax_rows<T: Scalar>(x: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    if inner == 1 {
        out.copy_from_slice(x);
        out.chunks_exact_mut(len).for_each(softmax_in_place);
        return;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| o * len * inner + l * inner + i;
            let mut max = T::neg_infinity();
            for l in 0..len {
                max = max.max(x[at(l)]);
            }
            let mut total = T::zero();
            for l in 0..len {
                let e = (x[at(l)] - max).exp();
                out[at(l)] = e;
                total += e;
            }
            for l in 0..len {
                out[at(l)] /= total;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), requires: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    /// Records an input tensor. Gradients are only reported for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.values[x.0].map(f);
        let r = self.requires[x.0];
        self.push(out, op, r)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// Natural log with the input clamped below at `LOG_EPS`.
    pub fn log(&mut self, x: Var) -> Var {
        let eps = T::lit(LOG_EPS);
        self.unary(x, move |v| v.max(eps).ln(), Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, move |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, move |v| v + c, Op::AddScalar(x))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            let shape = broadcast_shape(name, va.shape(), vb.shape())?;
            let ia = broadcast_index(va.shape(), &shape);
            let ib = broadcast_index(vb.shape(), &shape);
            let (da, db) = (va.data(), vb.data());
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::new(shape, data)?
        };
        let r = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(out, op, r))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Affine map over the last axis: `x[.., din] · w[din, dout] + b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (&self.values[x.0], &self.values[w.0]);
        let din = *vx.shape().last().unwrap_or(&0);
        if vw.rank() != 2 || vw.shape()[0] != din || vx.rank() == 0 {
            return Err(Error::Shape { op: "linear", lhs: vx.shape().to_vec(), rhs: vw.shape().to_vec() });
        }
        let dout = vw.shape()[1];
        if let Some(b) = b {
            if self.values[b.0].shape() != [dout] {
                return Err(Error::Shape { op: "linear bias", lhs: vw.shape().to_vec(), rhs: self.values[b.0].shape().to_vec() });
            }
        }
        let rows = vx.len() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.values[b.0].data();
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(T::one(), vx.data(), MatLayout::dense(0, rows, din), vw.data(), MatLayout::dense(0, din, dout), beta, &mut out, MatLayout::dense(0, rows, dout));
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let r = self.requires[x.0] || self.requires[w.0] || b.is_some_and(|b| self.requires[b.0]);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, r))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched matrix product `op(a) · op(b)` where `op` optionally transposes the
    /// two trailing axes. Leading (batch) axes broadcast.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.values[a.0].shape().to_vec(), self.values[b.0].shape().to_vec());
        let err = || Error::Shape { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(err());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape("matmul", ba, bb).map_err(|_| err())?;
        let a_batch = broadcast_index(ba, &batch);
        let b_batch = broadcast_index(bb, &batch);
        let nb = a_batch.len();
        let mut out = vec![T::zero(); nb * m * n];
        let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
        for bi in 0..nb {
            let la = op_layout(a_batch[bi] * ra * ca, ra, ca, ta);
            let lb = op_layout(b_batch[bi] * rb * cb, rb, cb, tb);
            gemm(T::one(), da, la, db, lb, T::zero(), &mut out, MatLayout::dense(bi * m * n, m, n));
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let r = self.requires[a.0] || self.requires[b.0];
        let plan = MatMulPlan { m, k, n, a_batch, b_batch };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, ta, tb, plan }, r))
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.values[x.0].rank() {
            return Err(Error::Shape { op, lhs: self.values[x.0].shape().to_vec(), rhs: vec![axis] });
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let vx = &self.values[x.0];
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let mut out = vec![T::zero(); vx.len()];
        softmax_rows(vx.data(), &mut out, outer, len, inner);
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let r = self.requires[x.0];
        Ok(self.push(t, Op::Softmax { x, axis }, r))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let vx = &self.values[x.0];
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let lse = logsumexp_axis(vx.data(), outer, len, inner);
        let d = vx.data();
        let out = (0..vx.len())
            .map(|idx| {
                let (o, i) = (idx / (len * inner), idx % inner);
                d[idx] - lse[o * inner + i]
            })
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let r = self.requires[x.0];
        Ok(self.push(t, Op::LogSoftmax { x, axis }, r))
    }

    /// `log Σ exp(x)` along `axis`; the axis is removed.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "logsumexp")?;
        let vx = &self.values[x.0];
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let out = logsumexp_axis(vx.data(), outer, len, inner);
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let r = self.requires[x.0];
        Ok(self.push(t, Op::LogSumExp { x, axis }, r))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data().iter().copied().sum();
        let r = self.requires[x.0];
        self.push(Tensor::scalar(s), Op::Sum(x), r)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.values[x.0];
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        let r = self.requires[x.0];
        self.push(Tensor::scalar(s), Op::Mean(x), r)
    }

    fn reduce_axis(&self, x: Var, axis: usize) -> (Vec<usize>, usize, usize, usize) {
        let vx = &self.values[x.0];
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        (shape, outer, len, inner)
    }

    /// Sum along `axis`; the axis is removed.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum_axis")?;
        let (shape, outer, len, inner) = self.reduce_axis(x, axis);
        let d = self.values[x.0].data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let r = self.requires[x.0];
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis }, r))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean_axis")?;
        let (shape, outer, len, inner) = self.reduce_axis(x, axis);
        let d = self.values[x.0].data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let inv = T::one() / T::lit(len as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let r = self.requires[x.0];
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, axis }, r))
    }

    /// Minimum along `axis`; the gradient flows to the (first) minimiser.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "min_axis")?;
        let (shape, outer, len, inner) = self.reduce_axis(x, axis);
        if len == 0 {
            return Err(contract("min over an empty axis"));
        }
        let d = self.values[x.0].data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for l in 1..len {
                    if d[(o * len + l) * inner + i] < d[(o * len + best) * inner + i] {
                        best = l;
                    }
                }
                out[o * inner + i] = d[(o * len + best) * inner + i];
                arg[o * inner + i] = best;
            }
        }
        let r = self.requires[x.0];
        Ok(self.push(Tensor::new(shape, out)?, Op::MinAxis { x, axis, arg }, r))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.values[x.0].clone().reshape(shape)?;
        let r = self.requires[x.0];
        Ok(self.push(t, Op::Reshape(x), r))
    }

    /// Broadcasts `x` to `shape` (trailing-axis alignment).
    pub fn expand(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let vx = &self.values[x.0];
        let target = broadcast_shape("expand", vx.shape(), &shape)?;
        if target != shape {
            return Err(Error::Shape { op: "expand", lhs: vx.shape().to_vec(), rhs: shape });
        }
        let idx = broadcast_index(vx.shape(), &shape);
        let d = vx.data();
        let data = idx.iter().map(|&i| d[i]).collect();
        let r = self.requires[x.0];
        Ok(self.push(Tensor::new(shape, data)?, Op::Expand(x), r))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| contract("concat of zero tensors"))?;
        self.check_axis(*first, axis, "concat")?;
        let base = self.values[first.0].shape().to_vec();
        let mut total = 0;
        for x in xs {
            let s = self.values[x.0].shape();
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let v = &self.values[x.0];
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let r = xs.iter().any(|x| self.requires[x.0]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { xs: xs.to_vec(), axis }, r))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let vx = &self.values[x.0];
        let (outer, full, inner) = split_axis(vx.shape(), axis);
        if start + len > full {
            return Err(Error::Shape { op: "slice", lhs: vx.shape().to_vec(), rhs: vec![start, len] });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&vx.data()[from..from + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let r = self.requires[x.0];
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { x, axis, start }, r))
    }

    /// Picks row `rows[b]` of every batch element: `[B, n, d] -> [B, 1, d]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = &self.values[x.0];
        let s = vx.shape();
        if s.len() != 3 || rows.len() != s[0] || rows.iter().any(|&r| r >= s[1]) {
            return Err(Error::Shape { op: "gather_rows", lhs: s.to_vec(), rhs: rows.to_vec() });
        }
        let (n, d) = (s[1], s[2]);
        let mut data = Vec::with_capacity(rows.len() * d);
        for (b, &row) in rows.iter().enumerate() {
            let from = (b * n + row) * d;
            data.extend_from_slice(&vx.data()[from..from + d]);
        }
        let shape = vec![s[0], 1, d];
        let r = self.requires[x.0];
        Ok(self.push(Tensor::new(shape, data)?, Op::GatherRows { x, rows: rows.to_vec() }, r))
    }

    /// Picks entry `idx[b]` of every row: `[B, K] -> [B]`.
    pub fn select_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = &self.values[x.0];
        let s = vx.shape();
        if s.len() != 2 || idx.len() != s[0] || idx.iter().any(|&i| i >= s[1]) {
            return Err(Error::Shape { op: "select_last", lhs: s.to_vec(), rhs: idx.to_vec() });
        }
        let data = idx.iter().enumerate().map(|(b, &i)| vx.data()[b * s[1] + i]).collect();
        let r = self.requires[x.0];
        Ok(self.push(Tensor::new(vec![s[0]], data)?, Op::SelectLast { x, idx: idx.to_vec() }, r))
    }

    /// Per-row grouped sums: `out[b, j] = Σ_{i: seg[b·n+i] = j} x[b, i]`.
    ///
    /// Entries with `None` are skipped. Each group is summed in index order, so
    /// the result does not depend on how group ids are numbered.
    pub fn segment_sum(&mut self, x: Var, seg: &[Option<usize>], groups: usize) -> Result<Var> {
        let vx = &self.values[x.0];
        let s = vx.shape();
        if s.len() != 2 || seg.len() != vx.len() || seg.iter().flatten().any(|&j| j >= groups) {
            return Err(Error::Shape { op: "segment_sum", lhs: s.to_vec(), rhs: vec![seg.len(), groups] });
        }
        let (rows, n) = (s[0], s[1]);
        let mut out = vec![T::zero(); rows * groups];
        for b in 0..rows {
            for i in 0..n {
                if let Some(j) = seg[b * n + i] {
                    out[b * groups + j] += vx.data()[b * n + i];
                }
            }
        }
        let r = self.requires[x.0];
        Ok(self.push(Tensor::new(vec![rows, groups], out)?, Op::SegmentSum { x, seg: seg.to_vec() }, r))
    }

    /// Multi-head scaled dot-product attention with key masking.
    ///
    /// `q: [B, nq, d]`, `k, v: [B, nk, d]`; heads split the last axis into
    /// contiguous chunks of `d / heads`. Masked keys (`live[b·nk + j] == false`)
    /// receive the additive logit [`MASK_LOGIT`]. Every batch element needs at
    /// least one live key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, live: Option<&[bool]>) -> Result<Var> {
        let (sq, sk, sv) = (self.values[q.0].shape(), self.values[k.0].shape(), self.values[v.0].shape());
        let ok = sq.len() == 3 && sk.len() == 3 && sk == sv && sq[0] == sk[0] && sq[2] == sk[2];
        if !ok {
            return Err(Error::Shape { op: "attention", lhs: sq.to_vec(), rhs: sk.to_vec() });
        }
        let (batch, nq, d, nk) = (sq[0], sq[1], sq[2], sk[1]);
        if heads == 0 || d % heads != 0 {
            return Err(contract(format!("width {d} is not divisible by {heads} heads")));
        }
        if let Some(live) = live {
            if live.len() != batch * nk {
                return Err(Error::Shape { op: "attention mask", lhs: sk.to_vec(), rhs: vec![live.len()] });
            }
        }
        for b in 0..batch {
            let any_live = nk > 0 && live.is_none_or(|l| l[b * nk..(b + 1) * nk].iter().any(|&x| x));
            if !any_live {
                return Err(contract(format!("batch element {b} has no live keys")));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mask_logit = T::lit(MASK_LOGIT);
        let (dq, dk, dv) = (self.values[q.0].data(), self.values[k.0].data(), self.values[v.0].data());
        let mut out = vec![T::zero(); batch * nq * d];
        let mut probs = vec![T::zero(); batch * heads * nq * nk];
        for b in 0..batch {
            for h in 0..heads {
                let lq = MatLayout::strided(b * nq * d + h * dh, nq, dh, d);
                let lk = MatLayout::strided(b * nk * d + h * dh, nk, dh, d);
                let lp = MatLayout::dense((b * heads + h) * nq * nk, nq, nk);
                gemm(scale, dq, lq, dk, lk.t(), T::zero(), &mut probs, lp);
                let block = &mut probs[lp.offset..lp.offset + nq * nk];
                if let Some(live) = live {
                    let keys = &live[b * nk..(b + 1) * nk];
                    for row in block.chunks_mut(nk) {
                        for (s, &alive) in row.iter_mut().zip(keys) {
                            if !alive {
                                *s += mask_logit;
                            }
                        }
                    }
                }
                block.chunks_exact_mut(nk).for_each(softmax_in_place);
                let lo = MatLayout::strided(b * nq * d + h * dh, nq, dh, d);
                gemm(T::one(), &probs, lp, dv, lk, T::zero(), &mut out, lo);
            }
        }
        let r = self.requires[q.0] || self.requires[k.0] || self.requires[v.0];
        let shape = vec![batch, nq, d];
        let probs = r.then_some(probs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Attention { q, k, v, heads, probs }, r))
    }

    /// Propagates `d loss / d node` for every node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.values.is_empty() {
            return Err(contract("backward on an empty tape"));
        }
        if self.values[loss.0].len() != 1 {
            return Err(contract(format!("backward needs a scalar loss, got shape {:?}", self.values[loss.0].shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.requires[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.values[..=loss.0].iter().map(|v| v.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], x: Var, f: impl FnOnce(&mut [T])) {
        if self.requires[x.0] {
            let len = self.values[x.0].len();
            f(accumulate(&mut grads[x.0], len));
        }
    }

    fn acc_map(&self, grads: &mut [Option<Vec<T>>], x: Var, g: &[T], f: impl Fn(usize, T) -> T) {
        self.acc_with(grads, x, |dst| {
            for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
                *d += f(i, gi);
            }
        });
    }

    fn acc_broadcast(&self, grads: &mut [Option<Vec<T>>], x: Var, out_shape: &[usize], g: &[T], f: impl Fn(usize, T) -> T) {
        let src = self.values[x.0].shape().to_vec();
        if src == out_shape {
            self.acc_map(grads, x, g, f);
            return;
        }
        let idx = broadcast_index(&src, out_shape);
        self.acc_with(grads, x, |dst| {
            for (i, &gi) in g.iter().enumerate() {
                dst[idx[i]] += f(i, gi);
            }
        });
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.values[idx];
        let y = out.data();
        let val = |v: Var| self.values[v.0].data();
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Neg(x) => self.acc_map(grads, *x, g, |_, gi| -gi),
            Op::Exp(x) => self.acc_map(grads, *x, g, |i, gi| gi * y[i]),
            Op::Log(x) => {
                let xv = val(*x);
                let eps = T::lit(LOG_EPS);
                self.acc_map(grads, *x, g, |i, gi| if xv[i] < eps { T::zero() } else { gi / xv[i] });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                self.acc_map(grads, *x, g, |i, gi| if xv[i] > T::zero() { gi } else { T::zero() });
            }
            Op::Sigmoid(x) => self.acc_map(grads, *x, g, |i, gi| gi * y[i] * (T::one() - y[i])),
            Op::Softplus(x) => {
                let xv = val(*x);
                self.acc_map(grads, *x, g, |i, gi| gi * sigmoid(xv[i]));
            }
            Op::Square(x) => {
                let xv = val(*x);
                let two = T::lit(2.0);
                self.acc_map(grads, *x, g, |i, gi| two * xv[i] * gi);
            }
            Op::Tanh(x) => self.acc_map(grads, *x, g, |i, gi| gi * (T::one() - y[i] * y[i])),
            Op::Scale(x, c) => self.acc_map(grads, *x, g, |_, gi| gi * *c),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc_map(grads, *x, g, |_, gi| gi),
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, out.shape(), g, |_, gi| gi);
                self.acc_broadcast(grads, *b, out.shape(), g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, out.shape(), g, |_, gi| gi);
                self.acc_broadcast(grads, *b, out.shape(), g, |_, gi| -gi);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(self.ops[idx], Op::Div(..));
                let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
                let ia = broadcast_index(sa, out.shape());
                let ib = broadcast_index(sb, out.shape());
                let (va, vb) = (val(*a), val(*b));
                if is_div {
                    self.acc_broadcast(grads, *a, out.shape(), g, |i, gi| gi / vb[ib[i]]);
                    self.acc_broadcast(grads, *b, out.shape(), g, |i, gi| {
                        let bv = vb[ib[i]];
                        -gi * va[ia[i]] / (bv * bv)
                    });
                } else {
                    self.acc_broadcast(grads, *a, out.shape(), g, |i, gi| gi * vb[ib[i]]);
                    self.acc_broadcast(grads, *b, out.shape(), g, |i, gi| gi * va[ia[i]]);
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (&self.values[x.0], &self.values[w.0]);
                let (din, dout) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.len() / din.max(1);
                let lg = MatLayout::dense(0, rows, dout);
                self.acc_with(grads, *x, |dx| {
                    gemm(T::one(), g, lg, vw.data(), MatLayout::dense(0, din, dout).t(), T::one(), dx, MatLayout::dense(0, rows, din));
                });
                self.acc_with(grads, *w, |dw| {
                    gemm(T::one(), vx.data(), MatLayout::dense(0, rows, din).t(), g, lg, T::one(), dw, MatLayout::dense(0, din, dout));
                });
                if let Some(b) = b {
                    self.acc_with(grads, *b, |db| {
                        for r in 0..rows {
                            for (d, &gi) in db.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                                *d += gi;
                            }
                        }
                    });
                }
            }
            Op::MatMul { a, b, ta, tb, plan } => {
                let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
                let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
                let (va, vb) = (val(*a), val(*b));
                let MatMulPlan { m, k, n, a_batch, b_batch } = plan;
                let _ = k;
                for bi in 0..a_batch.len() {
                    let la = op_layout(a_batch[bi] * ra * ca, ra, ca, *ta);
                    let lb = op_layout(b_batch[bi] * rb * cb, rb, cb, *tb);
                    let lg = MatLayout::dense(bi * m * n, *m, *n);
                    // d op(A) = G · op(B)^T, written through op(A)'s layout.
                    self.acc_with(grads, *a, |da| gemm(T::one(), g, lg, vb, lb.t(), T::one(), da, la));
                    self.acc_with(grads, *b, |db| gemm(T::one(), va, la.t(), g, lg, T::one(), db, lb));
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                self.acc_with(grads, *x, |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                dx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                self.acc_with(grads, *x, |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let total: T = (0..len).map(|l| g[at(l)]).sum();
                            for l in 0..len {
                                dx[at(l)] += g[at(l)] - y[at(l)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LogSumExp { x, axis } => {
                let xs = self.values[x.0].shape();
                let (outer, len, inner) = split_axis(xs, *axis);
                let xv = val(*x);
                self.acc_with(grads, *x, |dx| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                let at = (o * len + l) * inner + i;
                                dx[at] += g[o * inner + i] * (xv[at] - y[o * inner + i]).exp();
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc_map(grads, *x, &vec![g[0]; self.values[x.0].len()], |_, gi| gi),
            Op::Mean(x) => {
                let len = self.values[x.0].len();
                let gi = g[0] / T::lit(len as f64);
                self.acc_with(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += gi));
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.values[x.0].shape(), *axis);
                let factor = if matches!(self.ops[idx], Op::MeanAxis { .. }) { T::one() / T::lit(len as f64) } else { T::one() };
                self.acc_with(grads, *x, |dx| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                dx[(o * len + l) * inner + i] += g[o * inner + i] * factor;
                            }
                        }
                    }
                });
            }
            Op::MinAxis { x, axis, arg } => {
                let (outer, len, inner) = split_axis(self.values[x.0].shape(), *axis);
                self.acc_with(grads, *x, |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            dx[(o * len + arg[o * inner + i]) * inner + i] += g[o * inner + i];
                        }
                    }
                });
            }
            Op::Expand(x) => self.acc_broadcast(grads, *x, out.shape(), g, |_, gi| gi),
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut start = 0;
                for x in xs {
                    let len = self.values[x.0].shape()[*axis];
                    self.acc_with(grads, *x, |dx| {
                        for o in 0..outer {
                            let src = (o * total + start) * inner;
                            let dst = o * len * inner;
                            for (d, &gi) in dx[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                                *d += gi;
                            }
                        }
                    });
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.values[x.0].shape(), *axis);
                let len = out.shape()[*axis];
                self.acc_with(grads, *x, |dx| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for (d, &gi) in dx[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                            *d += gi;
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let s = self.values[x.0].shape();
                let (n, d) = (s[1], s[2]);
                self.acc_with(grads, *x, |dx| {
                    for (b, &row) in rows.iter().enumerate() {
                        for c in 0..d {
                            dx[(b * n + row) * d + c] += g[b * d + c];
                        }
                    }
                });
            }
            Op::SelectLast { x, idx: sel } => {
                let k = self.values[x.0].shape()[1];
                self.acc_with(grads, *x, |dx| {
                    for (b, &j) in sel.iter().enumerate() {
                        dx[b * k + j] += g[b];
                    }
                });
            }
            Op::SegmentSum { x, seg } => {
                let n = self.values[x.0].shape()[1];
                let groups = out.shape()[1];
                self.acc_with(grads, *x, |dx| {
                    for (i, s) in seg.iter().enumerate() {
                        if let Some(j) = s {
                            dx[i] += g[(i / n) * groups + j];
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                let probs = probs.as_ref().expect("attention probabilities saved when grad is required");
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, q: Var, k: Var, v: Var, heads: usize, probs: &[T], g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (sq, sk) = (self.values[q.0].shape(), self.values[k.0].shape());
        let (batch, nq, d, nk) = (sq[0], sq[1], sq[2], sk[1]);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (vq, vk, vv) = (self.values[q.0].data(), self.values[k.0].data(), self.values[v.0].data());
        let mut gq = vec![T::zero(); vq.len()];
        let mut gk = vec![T::zero(); vk.len()];
        let mut gv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); nq * nk];
        let ld = MatLayout::dense(0, nq, nk);
        for b in 0..batch {
            for h in 0..heads {
                let lq = MatLayout::strided(b * nq * d + h * dh, nq, dh, d);
                let lk = MatLayout::strided(b * nk * d + h * dh, nk, dh, d);
                let lp = MatLayout::dense((b * heads + h) * nq * nk, nq, nk);
                gemm(T::one(), probs, lp.t(), g, lq, T::one(), &mut gv, lk);
                gemm(T::one(), g, lq, vv, lk.t(), T::zero(), &mut dp, ld);
                let p = &probs[lp.offset..lp.offset + nq * nk];
                for (prow, drow) in p.chunks(nk).zip(dp.chunks_mut(nk)) {
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
                gemm(scale, &dp, ld, vk, lk, T::one(), &mut gq, lq);
                gemm(scale, &dp, ld.t(), vq, lq, T::one(), &mut gk, lk);
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            self.acc_map(grads, var, &local, |_, gi| gi);
        }
    }
}

fn op_layout(offset: usize, rows: usize, cols: usize, transpose: bool) -> MatLayout {
    let l = MatLayout::dense(offset, rows, cols);
    if transpose {
        l.t()
    } else {
        l
    }
}

fn logsumexp_axis<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, l| m.max(x[at(l)]));
            if max == T::neg_infinity() {
                out[o * inner + i] = max;
                continue;
            }
            let total: T = (0..len).map(|l| (x[at(l)] - max).exp()).sum();
            out[o * inner + i] = max + total.ln();
        }
    }
    out
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}
