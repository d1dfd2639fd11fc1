//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value to the
//! graph; [`Graph::backward`] replays the record in reverse. Node order is
//! creation order, so the record is topologically sorted by construction.
//! A fresh graph is built for each forward pass.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Result, TensorError};
use crate::real::{gemm, Operand, Real};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRows(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    Diag(Var),
    NormalizeSum(Var),
    MeanRows(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of trainable leaves produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    graph: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.index()).and_then(|g| g.take())
    }
}

/// Record of one forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        if v.graph != self.id {
            return Err(TensorError::ForeignVar);
        }
        self.nodes.get(v.index()).ok_or(TensorError::ForeignVar)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, requires_grad });
        Var { graph: self.id, index }
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index()].requires_grad);
        self.push(value, op, requires_grad)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "variable from a different graph");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<(&Tensor<T>, &Tensor<T>)> {
        let ta = &self.check(a)?.value;
        let tb = &self.check(b)?.value;
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        Ok((ta, tb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same("add", a, b)?;
        let out = zip_map(ta, tb, |x, y| x + y);
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same("sub", a, b)?;
        let out = zip_map(ta, tb, |x, y| x - y);
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same("mul", a, b)?;
        let out = zip_map(ta, tb, |x, y| x * y);
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.check(a)?.value.map(|x| x * s);
        Ok(self.push_op(out, Op::Scale(a, s), &[a]))
    }

    /// Adds vector `b` (length `cols`) to every row of matrix `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let tx = &self.check(x)?.value;
        let tb = &self.check(b)?.value;
        let (r, c) = tx.dims2("add_row")?;
        if tb.len() != c {
            return Err(shape_err("add_row", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        for i in 0..r {
            for (o, &bv) in out[i * c..(i + 1) * c].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push_op(out, Op::AddRow(x, b), &[x, b]))
    }

    /// Scales row `i` of `x` by `w[i]`.
    pub fn mul_rows(&mut self, w: Var, x: Var) -> Result<Var> {
        let tw = &self.check(w)?.value;
        let tx = &self.check(x)?.value;
        let (r, c) = tx.dims2("mul_rows")?;
        if tw.len() != r {
            return Err(shape_err("mul_rows", tw.shape(), tx.shape()));
        }
        let mut out = tx.data().to_vec();
        for i in 0..r {
            let s = tw.data()[i];
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push_op(out, Op::MulRows(w, x), &[w, x]))
    }

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.check(a)?.value;
        let tb = &self.check(b)?.value;
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(Operand::plain(ta.data(), m, k), Operand::plain(tb.data(), k, n), &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `[m×k] · [n×k]ᵀ -> [m×n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.check(a)?.value;
        let tb = &self.check(b)?.value;
        let (m, k) = ta.dims2("matmul_nt")?;
        let (n, k2) = tb.dims2("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(Operand::plain(ta.data(), m, k), Operand::t(tb.data(), n, k), &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.value.transpose()?;
        Ok(self.push_op(out, Op::Transpose(a), &[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.value.map(gelu_fwd);
        Ok(self.push_op(out, Op::Gelu(a), &[a]))
    }

    /// Standardizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let tx = &self.check(x)?.value;
        let tg = &self.check(gain)?.value;
        let tb = &self.check(bias)?.value;
        let d = *tx.shape().last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            got: Vec::new(),
        })?;
        if tg.len() != d || tb.len() != d {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.len() / d.max(1);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut normalized = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let xs = &tx.data()[r * d..(r + 1) * d];
            let mean = xs.iter().copied().sum::<T>() * inv_d;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (xs[j] - mean) * s;
                normalized[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push_op(out, Op::LayerNorm { x, gain, bias, normalized, rstd }, &[x, gain, bias]))
    }

    /// Row-wise softmax with max subtraction. A vector is treated as one row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.check(a)?.value;
        let c = *ta.shape().last().unwrap_or(&1);
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push_op(out, Op::Softmax(a), &[a]))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same("mse", a, b)?;
        let n = T::from_usize(ta.len().max(1)).unwrap();
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.push_op(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.value.sum();
        Ok(self.push_op(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        let s = t.sum() / T::from_usize(t.len().max(1)).unwrap();
        Ok(self.push_op(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.check(a)?.value.reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(a), &[a]))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = None;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.check(p)?.value;
            let (r, c) = t.dims2("concat_rows")?;
            if let Some(c0) = cols {
                if c0 != c {
                    return Err(shape_err("concat_rows", &[rows, c0], t.shape()));
                }
            }
            cols = Some(c);
            rows += r;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols.unwrap_or(0)], data)?;
        Ok(self.push_op(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.check(a)?.value;
        let (r, c) = t.dims2("slice_rows")?;
        if start > end || end > r {
            return Err(TensorError::Index { op: "slice_rows", index: end, extent: r });
        }
        let out = Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())?;
        Ok(self.push_op(out, Op::SliceRows { a, start }, &[a]))
    }

    /// Row `i` of a rank-2 tensor as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let r = self.slice_rows(a, i, i + 1)?;
        let c = self.shape(r)[1];
        self.reshape(r, vec![c])
    }

    /// Places rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.check(p)?.value.dims2("concat_cols")?);
        }
        let rows = dims.first().map_or(0, |d| d.0);
        if let Some(bad) = dims.iter().find(|d| d.0 != rows) {
            return Err(shape_err("concat_cols", &[rows, dims[0].1], &[bad.0, bad.1]));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &(_, c)) in parts.iter().zip(&dims) {
            let src = self.nodes[p.index()].value.data();
            for i in 0..rows {
                data[i * total + off..i * total + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push_op(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.check(a)?.value;
        let (r, c) = t.dims2("slice_cols")?;
        if start > end || end > c {
            return Err(TensorError::Index { op: "slice_cols", index: end, extent: c });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        let out = Tensor::new(vec![r, w], data)?;
        Ok(self.push_op(out, Op::SliceCols { a, start }, &[a]))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        let (r, c) = t.dims2("diag")?;
        if r != c {
            return Err(shape_err("diag", t.shape(), &[r, r]));
        }
        let out = Tensor::new(vec![r], (0..r).map(|i| t.data()[i * c + i]).collect())?;
        Ok(self.push_op(out, Op::Diag(a), &[a]))
    }

    /// `a / sum(a)`.
    pub fn normalize_sum(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        let s = t.sum();
        if !s.is_finite() {
            return Err(TensorError::NonFinite { op: "normalize_sum", value: s.to_string() });
        }
        if s == T::zero() {
            return Err(TensorError::Invalid {
                op: "normalize_sum",
                reason: format!("sum is {s}"),
            });
        }
        let out = t.map(|v| v / s);
        Ok(self.push_op(out, Op::NormalizeSum(a), &[a]))
    }

    /// Column means of a rank-2 tensor.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        let (r, c) = t.dims2("mean_rows")?;
        let inv = T::one() / T::from_usize(r.max(1)).unwrap();
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(vec![c], out)?;
        Ok(self.push_op(out, Op::MeanRows(a), &[a]))
    }

    /// `-log softmax(logits)[label]` for a logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = &self.check(logits)?.value;
        if t.ndim() != 1 {
            return Err(TensorError::Rank { op: "cross_entropy", expected: 1, got: t.shape().to_vec() });
        }
        if label >= t.len() {
            return Err(TensorError::Index { op: "cross_entropy", index: label, extent: t.len() });
        }
        let mut probs = t.data().to_vec();
        softmax_in_place(&mut probs);
        let max = t.data().iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + t.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let loss = lse - t.data()[label];
        Ok(self.push_op(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }, &[logits]))
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let v = self.check(a)?.value.clone();
        Ok(self.constant(v))
    }

    /// Reverse pass from a scalar loss. Every leaf of the graph gets a
    /// gradient; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(TensorError::Detached);
        }
        let n = loss.index() + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.index()] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let data = grads
                    .get_mut(i)
                    .and_then(|g| g.take())
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients { graph: self.id, grads: out })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        // Inputs always precede their consumers, so `v` lies inside the slice.
        let len = self.nodes[v.index()].value.len();
        f(grads[v.index()].get_or_insert_with(|| vec![T::zero(); len]));
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.index()].value;
        let needs = |v: Var| self.nodes[v.index()].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if needs(v) {
                        self.acc(grads, v, |dst| add_into(dst, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    self.acc(grads, *a, |dst| add_into(dst, g));
                }
                if needs(*b) {
                    self.acc(grads, *b, |dst| dst.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if needs(*a) {
                    self.acc(grads, *a, |dst| {
                        for ((d, &x), &y) in dst.iter_mut().zip(g).zip(tb.data()) {
                            *d += x * y;
                        }
                    });
                }
                if needs(*b) {
                    self.acc(grads, *b, |dst| {
                        for ((d, &x), &y) in dst.iter_mut().zip(g).zip(ta.data()) {
                            *d += x * y;
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |dst| dst.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *s));
            }
            Op::AddRow(x, b) => {
                let c = val(*b).len();
                if needs(*x) {
                    self.acc(grads, *x, |dst| add_into(dst, g));
                }
                if needs(*b) {
                    self.acc(grads, *b, |dst| {
                        for row in g.chunks(c) {
                            add_into(dst, row);
                        }
                    });
                }
            }
            Op::MulRows(w, x) => {
                let (tw, tx) = (val(*w), val(*x));
                let c = tx.shape()[1];
                if needs(*w) {
                    self.acc(grads, *w, |dst| {
                        for (i, d) in dst.iter_mut().enumerate() {
                            let gr = &g[i * c..(i + 1) * c];
                            *d += gr.iter().zip(tx.row(i)).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    });
                }
                if needs(*x) {
                    self.acc(grads, *x, |dst| {
                        for (i, &s) in tw.data().iter().enumerate() {
                            for (d, &gv) in dst[i * c..(i + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                                *d += s * gv;
                            }
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if needs(*a) {
                    // dA = G·Bᵀ
                    self.acc(grads, *a, |dst| {
                        gemm(Operand::plain(g, m, n), Operand::t(tb.data(), k, n), dst, true)
                    });
                }
                if needs(*b) {
                    // dB = Aᵀ·G
                    self.acc(grads, *b, |dst| {
                        gemm(Operand::t(ta.data(), m, k), Operand::plain(g, m, n), dst, true)
                    });
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if needs(*a) {
                    // dA = G·B
                    self.acc(grads, *a, |dst| {
                        gemm(Operand::plain(g, m, n), Operand::plain(tb.data(), n, k), dst, true)
                    });
                }
                if needs(*b) {
                    // dB = Gᵀ·A
                    self.acc(grads, *b, |dst| {
                        gemm(Operand::t(g, m, n), Operand::plain(ta.data(), m, k), dst, true)
                    });
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                self.acc(grads, *a, |dst| {
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let ta = val(*a);
                self.acc(grads, *a, |dst| {
                    for ((d, &gv), &x) in dst.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * gelu_grad(x);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, normalized, rstd } => {
                let tg = val(*gain);
                let d = tg.len();
                if needs(*gain) {
                    self.acc(grads, *gain, |dst| {
                        for (gr, hr) in g.chunks(d).zip(normalized.chunks(d)) {
                            for ((dv, &gv), &h) in dst.iter_mut().zip(gr).zip(hr) {
                                *dv += gv * h;
                            }
                        }
                    });
                }
                if needs(*bias) {
                    self.acc(grads, *bias, |dst| {
                        for gr in g.chunks(d) {
                            add_into(dst, gr);
                        }
                    });
                }
                if needs(*x) {
                    let inv_d = T::one() / T::from_usize(d).unwrap();
                    self.acc(grads, *x, |dst| {
                        let mut dh = vec![T::zero(); d];
                        for (r, &s) in rstd.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &normalized[r * d..(r + 1) * d];
                            for j in 0..d {
                                dh[j] = gr[j] * tg.data()[j];
                            }
                            let mean_dh = dh.iter().copied().sum::<T>() * inv_d;
                            let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                            for j in 0..d {
                                dst[r * d + j] += s * (dh[j] - mean_dh - hr[j] * mean_dhh);
                            }
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap_or(&1);
                self.acc(grads, *a, |dst| {
                    for ((dr, gr), yr) in dst.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let k = T::lit(2.0) * g[0] / T::from_usize(ta.len().max(1)).unwrap();
                if needs(*a) {
                    self.acc(grads, *a, |dst| {
                        for ((d, &x), &y) in dst.iter_mut().zip(ta.data()).zip(tb.data()) {
                            *d += k * (x - y);
                        }
                    });
                }
                if needs(*b) {
                    self.acc(grads, *b, |dst| {
                        for ((d, &x), &y) in dst.iter_mut().zip(ta.data()).zip(tb.data()) {
                            *d -= k * (x - y);
                        }
                    });
                }
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |dst| dst.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                let k = g[0] / T::from_usize(val(*a).len().max(1)).unwrap();
                self.acc(grads, *a, |dst| dst.iter_mut().for_each(|d| *d += k));
            }
            Op::Reshape(a) => self.acc(grads, *a, |dst| add_into(dst, g)),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        self.acc(grads, p, |dst| add_into(dst, &g[off..off + len]));
                    }
                    off += len;
                }
            }
            Op::SliceRows { a, start } => {
                let c = val(*a).shape()[1];
                self.acc(grads, *a, |dst| add_into(&mut dst[start * c..start * c + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    if needs(p) {
                        self.acc(grads, p, |dst| {
                            for i in 0..rows {
                                add_into(&mut dst[i * c..(i + 1) * c], &g[i * total + off..i * total + off + c]);
                            }
                        });
                    }
                    off += c;
                }
            }
            Op::SliceCols { a, start } => {
                let c = val(*a).shape()[1];
                let (rows, w) = (node.value.shape()[0], node.value.shape()[1]);
                self.acc(grads, *a, |dst| {
                    for i in 0..rows {
                        add_into(&mut dst[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::Diag(a) => {
                let n = g.len();
                self.acc(grads, *a, |dst| {
                    for i in 0..n {
                        dst[i * n + i] += g[i];
                    }
                });
            }
            Op::NormalizeSum(a) => {
                let s = val(*a).sum();
                let y = node.value.data();
                let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                self.acc(grads, *a, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += (gv - dot) / s;
                    }
                });
            }
            Op::MeanRows(a) => {
                let r = val(*a).shape()[0];
                let inv = T::one() / T::from_usize(r.max(1)).unwrap();
                self.acc(grads, *a, |dst| {
                    for row in dst.chunks_mut(g.len()) {
                        for (d, &gv) in row.iter_mut().zip(g) {
                            *d += gv * inv;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, label, probs } => {
                self.acc(grads, *logits, |dst| {
                    for (i, (d, &p)) in dst.iter_mut().zip(probs).enumerate() {
                        let target = if i == *label { T::one() } else { T::zero() };
                        *d += g[0] * (p - target);
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

/// Numerically stable in-place softmax; the normalizer is accumulated in
/// double precision so rows sum to one within a few ulps.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += v.as_f64();
    }
    let inv = T::lit(1.0 / total);
    row.iter_mut().for_each(|v| *v *= inv);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}
