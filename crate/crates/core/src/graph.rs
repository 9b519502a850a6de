//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order, so the node list
//! is already a topological order and `backward` is one reverse sweep.
//! Leaves borrow their data from caller-owned [`Tensor`]s; the graph never
//! mutates them. Gradients come back as a [`Gradients`] value that the caller
//! folds into its tunable tensors once the graph is dropped.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    NormalizeRows(Var),
    LogSumExpRows(Var, Option<Vec<bool>>),
    Diag(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Reshape(Var),
    Upsample(Var, usize),
}

struct Node<'a, T: Scalar> {
    shape: Vec<usize>,
    data: Cow<'a, [T]>,
    op: Op<T>,
    tracks_grad: bool,
    // Per-op auxiliary values kept from the forward pass (row norms, inverse stds).
    saved: Vec<T>,
}

/// Recorded computation over one float width.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Cow<'a, [T]>, op: Op<T>, tracks_grad: bool) -> Var {
        self.push_saved(shape, data, op, tracks_grad, Vec::new())
    }

    fn push_saved(
        &mut self,
        shape: Vec<usize>,
        data: Cow<'a, [T]>,
        op: Op<T>,
        tracks_grad: bool,
        saved: Vec<T>,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op,
            tracks_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks_grad
    }

    /// Registers a caller-owned tensor without copying it. Its gradient is
    /// tracked iff the tensor is tunable.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Registers an owned value (inputs, masks, targets).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    /// Registers an owned value whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, true)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.to_tensor(v);
        self.constant(t)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    /// The single element of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.to_vec()).expect("graph nodes are well formed")
    }

    fn unary(&mut self, x: Var, data: Vec<T>, op: Op<T>) -> Var {
        let shape = self.shape(x).to_vec();
        let tracks = self.tracks(x);
        self.push(shape, Cow::Owned(data), op, tracks)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `[m,k]·[k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.shape(a))
            .ok_or_else(|| Error::dim("matmul", self.shape(a), self.shape(b)))?;
        let (k2, n) = rows_cols(self.shape(b))
            .ok_or_else(|| Error::dim("matmul", self.shape(a), self.shape(b)))?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for t in 0..k {
                let s = av[i * k + t];
                if s == T::zero() {
                    continue;
                }
                let brow = &bv[t * n..(t + 1) * n];
                for (o, &bj) in row.iter_mut().zip(brow) {
                    *o = *o + s * bj;
                }
            }
        }
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), tracks))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x)).ok_or_else(|| Error::dim("transpose", self.shape(x), &[]))?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let tracks = self.tracks(x);
        Ok(self.push(vec![n, m], Cow::Owned(out), Op::Transpose(x), tracks))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let tracks = self.tracks(a) || self.tracks(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(data), op, tracks))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).iter().any(|v| *v == T::zero()) {
            return Err(Error::Degenerate("division by zero".into()));
        }
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (m, n) = rows_cols(self.shape(a)).ok_or_else(|| Error::dim(op, self.shape(a), self.shape(b)))?;
        if self.shape(b) != [n] {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok((m, n))
    }

    /// Adds a `[n]` row vector to every row of `[m,n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("add_row", a, b)?;
        let bv = self.value(b);
        let mut data = self.value(a).to_vec();
        for i in 0..m {
            for (x, &y) in data[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *x = *x + y;
            }
        }
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(vec![m, n], Cow::Owned(data), Op::AddRow(a, b), tracks))
    }

    /// Multiplies every row of `[m,n]` elementwise by a `[n]` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("mul_row", a, b)?;
        let bv = self.value(b);
        let mut data = self.value(a).to_vec();
        for i in 0..m {
            for (x, &y) in data[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *x = *x * y;
            }
        }
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(vec![m, n], Cow::Owned(data), Op::MulRow(a, b), tracks))
    }

    /// Elementwise `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let data = self.value(x).iter().map(|&v| scale * v + shift).collect();
        self.unary(x, data, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let data = self.value(x).iter().map(|&v| s * v).collect();
        self.unary(x, data, Op::Affine(x, s))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| v * normal_cdf(v)).collect();
        self.unary(x, data, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.unary(x, data, Op::Sigmoid(x))
    }

    /// Natural log; every element must be positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).iter().find(|v| **v <= T::zero()) {
            return Err(Error::Degenerate(format!("log of non-positive value {v}")));
        }
        let data = self.value(x).iter().map(|v| v.ln()).collect();
        Ok(self.unary(x, data, Op::Ln(x)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let data = self.value(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        self.unary(x, data, Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let tracks = self.tracks(x);
        self.push(Vec::new(), Cow::Owned(vec![s]), Op::Sum(x), tracks)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        let tracks = self.tracks(x);
        self.push(Vec::new(), Cow::Owned(vec![s]), Op::Mean(x), tracks)
    }

    /// Column means of `[m,n]`, giving `[n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x)).ok_or_else(|| Error::dim("mean_rows", self.shape(x), &[]))?;
        let xv = self.value(x);
        let inv = T::one() / T::of(m as f64);
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&xv[i * n..(i + 1) * n]) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        let tracks = self.tracks(x);
        Ok(self.push(vec![n], Cow::Owned(out), Op::MeanRows(x), tracks))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x)).ok_or_else(|| Error::dim("softmax_rows", self.shape(x), &[]))?;
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(n).take(m) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        Ok(self.unary(x, data, Op::SoftmaxRows(x)))
    }

    /// Normalizes each row to zero mean and unit variance (biased variance).
    pub fn layer_norm_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x)).ok_or_else(|| Error::dim("layer_norm_rows", self.shape(x), &[]))?;
        let mut data = self.value(x).to_vec();
        let mut inv_std = Vec::with_capacity(m);
        let nf = T::of(n as f64);
        for row in data.chunks_mut(n) {
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * r);
            inv_std.push(r);
        }
        let shape = vec![m, n];
        let tracks = self.tracks(x);
        Ok(self.push_saved(shape, Cow::Owned(data), Op::LayerNormRows(x), tracks, inv_std))
    }

    /// Scales each row to unit Euclidean norm. A zero row is an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x)).ok_or_else(|| Error::dim("normalize_rows", self.shape(x), &[]))?;
        let mut data = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(m);
        for (i, row) in data.chunks_mut(n).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() || !norm.is_finite() {
                return Err(Error::Degenerate(format!("row {i} has norm {norm}")));
            }
            row.iter_mut().for_each(|v| *v = *v / norm);
            norms.push(norm);
        }
        let tracks = self.tracks(x);
        Ok(self.push_saved(vec![m, n], Cow::Owned(data), Op::NormalizeRows(x), tracks, norms))
    }

    /// Row-wise `log Σ exp`, max-shifted. With a mask, only entries marked
    /// `true` take part; every row needs at least one.
    pub fn logsumexp_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x)).ok_or_else(|| Error::dim("logsumexp_rows", self.shape(x), &[]))?;
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(Error::dim("logsumexp_rows", &[m, n], &[mk.len()]));
            }
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let keep = |j: usize| mask.as_ref().is_none_or(|mk| mk[i * n + j]);
            let row = &xv[i * n..(i + 1) * n];
            let max = (0..n).filter(|&j| keep(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::Contract(format!("logsumexp row {i} has no entries")));
            }
            let s: T = (0..n).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum();
            out.push(max + s.ln());
        }
        let tracks = self.tracks(x);
        Ok(self.push(vec![m], Cow::Owned(out), Op::LogSumExpRows(x, mask), tracks))
    }

    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x)).ok_or_else(|| Error::dim("diag", self.shape(x), &[]))?;
        if m != n {
            return Err(Error::dim("diag", &[m, n], &[]));
        }
        let xv = self.value(x);
        let data = (0..n).map(|i| xv[i * n + i]).collect();
        let tracks = self.tracks(x);
        Ok(self.push(vec![n], Cow::Owned(data), Op::Diag(x), tracks))
    }

    /// Columns `start..end` of `[m,n]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x)).ok_or_else(|| Error::dim("slice_cols", self.shape(x), &[]))?;
        if start >= end || end > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, end]));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&xv[i * n + start..i * n + end]);
        }
        let tracks = self.tracks(x);
        Ok(self.push(vec![m, end - start], Cow::Owned(data), Op::SliceCols(x, start), tracks))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (m, _) = rows_cols(self.shape(first)).ok_or_else(|| Error::dim("concat_cols", self.shape(first), &[]))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match rows_cols(self.shape(p)) {
                Some((pm, pn)) if pm == m => widths.push(pn),
                _ => return Err(Error::dim("concat_cols", self.shape(first), self.shape(p))),
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let tracks = parts.iter().any(|&p| self.tracks(p));
        Ok(self.push(vec![m, n], Cow::Owned(data), Op::ConcatCols(parts.to_vec()), tracks))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or_else(|| Error::Contract("stack of nothing".into()))?;
        let d = self.value(first).len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.value(r).len() != d {
                return Err(Error::dim("stack_rows", self.shape(first), self.shape(r)));
            }
            data.extend_from_slice(self.value(r));
        }
        let tracks = rows.iter().any(|&r| self.tracks(r));
        Ok(self.push(vec![rows.len(), d], Cow::Owned(data), Op::StackRows(rows.to_vec()), tracks))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let data = self.value(x).to_vec();
        let tracks = self.tracks(x);
        Ok(self.push(shape.to_vec(), Cow::Owned(data), Op::Reshape(x), tracks))
    }

    /// Nearest-neighbour upsampling of `[h,w]` by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w) = rows_cols(self.shape(x)).ok_or_else(|| Error::dim("upsample", self.shape(x), &[]))?;
        if factor == 0 {
            return Err(Error::Contract("upsample factor 0".into()));
        }
        let xv = self.value(x);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(oh * ow);
        for r in 0..oh {
            for c in 0..ow {
                data.push(xv[(r / factor) * w + c / factor]);
            }
        }
        let tracks = self.tracks(x);
        Ok(self.push(vec![oh, ow], Cow::Owned(data), Op::Upsample(x, factor), tracks))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, vec![T::one()])])
    }

    /// Reverse sweep from arbitrary upstream gradients. Seeds on the same node
    /// add up.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::dim("backward seed", self.shape(*v), &[g.len()]));
            }
            accumulate(&mut grads[v.0], g);
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.tracks_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = &node.data;
        let mut send = |v: Var, g: Vec<T>| {
            if self.nodes[v.0].tracks_grad {
                accumulate(&mut grads[v.0], &g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.tracks(*a) {
                    let mut da = vec![T::zero(); m * k];
                    for r in 0..m {
                        let grow = &gy[r * n..(r + 1) * n];
                        for t in 0..k {
                            let brow = &bv[t * n..(t + 1) * n];
                            da[r * k + t] = grow.iter().zip(brow).map(|(&g, &b)| g * b).sum();
                        }
                    }
                    send(*a, da);
                }
                if self.tracks(*b) {
                    let mut db = vec![T::zero(); k * n];
                    for r in 0..m {
                        let grow = &gy[r * n..(r + 1) * n];
                        for t in 0..k {
                            let s = av[r * k + t];
                            if s == T::zero() {
                                continue;
                            }
                            for (d, &g) in db[t * n..(t + 1) * n].iter_mut().zip(grow) {
                                *d = *d + s * g;
                            }
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = gy[c * m + r];
                    }
                }
                send(*x, dx);
            }
            Op::Add(a, b) => {
                send(*a, gy.to_vec());
                send(*b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, gy.to_vec());
                send(*b, gy.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracks(*a) {
                    send(*a, gy.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                }
                if self.tracks(*b) {
                    send(*b, gy.iter().zip(av).map(|(&g, &a)| g * a).collect());
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracks(*a) {
                    send(*a, gy.iter().zip(bv).map(|(&g, &b)| g / b).collect());
                }
                if self.tracks(*b) {
                    let db = gy
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&g, (&a, &b))| -g * a / (b * b))
                        .collect();
                    send(*b, db);
                }
            }
            Op::AddRow(a, b) => {
                let n = self.shape(*b)[0];
                if self.tracks(*b) {
                    send(*b, col_sums(gy, n));
                }
                send(*a, gy.to_vec());
            }
            Op::MulRow(a, b) => {
                let n = self.shape(*b)[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracks(*b) {
                    let prod: Vec<T> = gy.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    send(*b, col_sums(&prod, n));
                }
                if self.tracks(*a) {
                    let da = gy.iter().enumerate().map(|(idx, &g)| g * bv[idx % n]).collect();
                    send(*a, da);
                }
            }
            Op::Affine(x, s) => send(*x, gy.iter().map(|&g| g * *s).collect()),
            Op::Gelu(x) => {
                let dx = gy
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&g, &v)| g * (normal_cdf(v) + v * normal_pdf(v)))
                    .collect();
                send(*x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = gy.iter().zip(y.iter()).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                send(*x, dx);
            }
            Op::Ln(x) => send(*x, gy.iter().zip(self.value(*x)).map(|(&g, &v)| g / v).collect()),
            Op::Clamp(x, lo, hi) => {
                let dx = gy
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&g, &v)| if v > *lo && v < *hi { g } else { T::zero() })
                    .collect();
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![gy[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![gy[0] / T::of(n as f64); n]);
            }
            Op::MeanRows(x) => {
                let m = self.shape(*x)[0];
                let inv = T::one() / T::of(m as f64);
                let row: Vec<T> = gy.iter().map(|&g| g * inv).collect();
                send(*x, row.repeat(m));
            }
            Op::SoftmaxRows(x) => {
                let n = self.shape(*x)[1];
                let mut dx = vec![T::zero(); y.len()];
                for ((d, g), s) in dx.chunks_mut(n).zip(gy.chunks(n)).zip(y.chunks(n)) {
                    let dot: T = g.iter().zip(s).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        d[j] = s[j] * (g[j] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::LayerNormRows(x) => {
                let n = self.shape(*x)[1];
                let nf = T::of(n as f64);
                let mut dx = vec![T::zero(); y.len()];
                for (r, ((d, g), xh)) in dx.chunks_mut(n).zip(gy.chunks(n)).zip(y.chunks(n)).enumerate() {
                    let inv = node.saved[r];
                    let mean_g = g.iter().copied().sum::<T>() / nf;
                    let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for j in 0..n {
                        d[j] = inv * (g[j] - mean_g - xh[j] * mean_gx);
                    }
                }
                send(*x, dx);
            }
            Op::NormalizeRows(x) => {
                let n = self.shape(*x)[1];
                let mut dx = vec![T::zero(); y.len()];
                for (r, ((d, g), u)) in dx.chunks_mut(n).zip(gy.chunks(n)).zip(y.chunks(n)).enumerate() {
                    let norm = node.saved[r];
                    let dot: T = g.iter().zip(u).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        d[j] = (g[j] - u[j] * dot) / norm;
                    }
                }
                send(*x, dx);
            }
            Op::LogSumExpRows(x, mask) => {
                let n = self.shape(*x)[1];
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.len()];
                for (r, &g) in gy.iter().enumerate() {
                    for j in 0..n {
                        let idx = r * n + j;
                        if mask.as_ref().is_none_or(|mk| mk[idx]) {
                            dx[idx] = g * (xv[idx] - y[r]).exp();
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Diag(x) => {
                let n = gy.len();
                let mut dx = vec![T::zero(); n * n];
                for (i, &g) in gy.iter().enumerate() {
                    dx[i * n + i] = g;
                }
                send(*x, dx);
            }
            Op::SliceCols(x, start) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = node.shape[1];
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&gy[r * w..(r + 1) * w]);
                }
                send(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.tracks(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&gy[r * n + offset..r * n + offset + w]);
                        }
                        send(p, dp);
                    }
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                let d = node.shape[1];
                for (r, &v) in rows.iter().enumerate() {
                    send(v, gy[r * d..(r + 1) * d].to_vec());
                }
            }
            Op::Reshape(x) => send(*x, gy.to_vec()),
            Op::Upsample(x, f) => {
                let (h, w) = (self.shape(*x)[0], self.shape(*x)[1]);
                let ow = w * f;
                let mut dx = vec![T::zero(); h * w];
                for (idx, &g) in gy.iter().enumerate() {
                    let (r, c) = (idx / ow, idx % ow);
                    dx[(r / f) * w + c / f] = dx[(r / f) * w + c / f] + g;
                }
                send(*x, dx);
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g.to_vec()),
    }
}

fn col_sums<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for row in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

pub(crate) fn normal_cdf<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn normal_pdf<T: Scalar>(x: T) -> T {
    T::of(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2) * (-(x * x) * T::of(0.5)).exp()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` is tracked and reachable.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into a tunable tensor.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        match self.wrt(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

// Free-standing primitives over 1-D inputs.

/// Cosine similarity of two vectors of equal length.
pub fn cosine_similarity<T: Scalar>(g: &mut Graph<'_, T>, u: Var, v: Var) -> Result<Var> {
    if g.value(u).len() != g.value(v).len() {
        return Err(Error::dim("cosine_similarity", g.shape(u), g.shape(v)));
    }
    let d = g.value(u).len();
    let ur = g.reshape(u, &[1, d])?;
    let vr = g.reshape(v, &[1, d])?;
    let un = g.normalize_rows(ur)?;
    let vn = g.normalize_rows(vr)?;
    let p = g.mul(un, vn)?;
    Ok(g.sum(p))
}

/// `log Σ exp(xs)` of a non-empty vector.
pub fn logsumexp<T: Scalar>(g: &mut Graph<'_, T>, xs: Var) -> Result<Var> {
    let n = g.value(xs).len();
    if g.shape(xs).len() != 1 {
        return Err(Error::dim("logsumexp", g.shape(xs), &[n]));
    }
    let row = g.reshape(xs, &[1, n])?;
    let l = g.logsumexp_rows(row, None)?;
    g.reshape(l, &[])
}
