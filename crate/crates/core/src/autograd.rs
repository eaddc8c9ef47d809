//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive applied to its variables in
//! execution order. Because a node can only refer to nodes created before
//! it, the tape is already a topological order, and [`Graph::backward`]
//! walks it once from the loss back to the first node.
//!
//! Leaf gradients live on the graph and are only ever added to: calling
//! `backward` twice doubles them. Intermediate adjoints are scratch space
//! rebuilt on every call.
//!
//! ```
//! use residual_transformer::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let w = g.leaf(Tensor::from_f64(&[1, 2], &[2.0, -1.0]).unwrap(), true);
//! let x = g.constant(Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
//! let y = g.matmul(w, x).unwrap();
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap().data(), &[3.0, 4.0]);
//! ```

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul_2d, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Mul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    MaskFill(Var, Arc<[bool]>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    Sum(Var),
    Slice { x: Var, r0: usize, c0: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    DiagEmbed { x: Var, diag: Var },
    Dropout { x: Var, mask: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recorded computation with reverse-mode gradients.
///
/// A graph and its nodes belong to one thread for the duration of a
/// forward/backward pass; independent graphs can run on separate threads.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Leaves with `requires_grad` get a zeroed
    /// gradient accumulator.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.grads.push(grad);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().fill(S::zero());
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.grads.push(None);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a * b^T`, the layout used by every linear projection.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    /// `op(a) * op(b)` with optional transposes folded into the kernel.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = matmul_2d(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`N` vector to every row of `x [.. x N]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.numel() != vx.cols() {
            return Err(Error::shape("add_row", vx.shape(), vr.shape()));
        }
        let n = vx.cols();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vr.data()[i % n])
            .collect();
        let value = Tensor::new(vx.shape(), data)?;
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).t()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(S::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu_fwd(v).0);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.cols();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vx.shape(), out).expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Replaces entries whose `allowed` flag is false with `-inf`.
    pub fn mask_fill(&mut self, x: Var, allowed: Arc<[bool]>) -> Result<Var> {
        let vx = self.value(x);
        if allowed.len() != vx.numel() {
            return Err(Error::shape("mask_fill", vx.shape(), &[allowed.len()]));
        }
        let data = vx
            .data()
            .iter()
            .zip(allowed.iter())
            .map(|(&v, &ok)| if ok { v } else { S::neg_infinity() })
            .collect();
        let value = Tensor::new(vx.shape(), data)?;
        Ok(self.push(value, Op::MaskFill(x, allowed), &[x]))
    }

    /// Per-row normalization over the last axis followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let n = vx.cols();
        if vg.numel() != n || vb.numel() != n {
            return Err(Error::shape("layer_norm", vx.shape(), vg.shape()));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::InvalidTensor(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let eps = S::from_f64_lossy(eps);
        let n_s = S::from_usize(n).unwrap();
        let rows = vx.rows();
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(n) {
            let mean = row.iter().copied().sum::<S>() / n_s;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n_s;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            &[x, gain, bias],
        ))
    }

    /// Gathers rows of `table [V x d]`, producing `[ids.len() x d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.ndim() != 2 || ids.is_empty() {
            return Err(Error::shape("embedding", vt.shape(), &[ids.len()]));
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidTensor(format!("token id {id} >= vocab {v}")));
            }
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean softmax cross-entropy of `logits [N x V]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let v = vl.cols();
        if vl.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let mut probs = vl.data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            if t >= v {
                return Err(Error::InvalidTensor(format!("target {t} >= classes {v}")));
            }
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            total += (lse - row[t]).to_f64_lossy();
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = S::from_f64_lossy(total / targets.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Rectangular block `rows r0..r0+nr`, `cols c0..c0+nc` of a matrix.
    pub fn slice(&mut self, x: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = match vx.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("slice", s, &[r0 + nr, c0 + nc])),
        };
        if nr == 0 || nc == 0 || r0 + nr > r || c0 + nc > c {
            return Err(Error::shape("slice", vx.shape(), &[r0 + nr, c0 + nc]));
        }
        let mut out = Vec::with_capacity(nr * nc);
        for i in r0..r0 + nr {
            out.extend_from_slice(&vx.data()[i * c + c0..i * c + c0 + nc]);
        }
        let value = Tensor::new(&[nr, nc], out)?;
        Ok(self.push(value, Op::Slice { x, r0, c0 }, &[x]))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::InvalidTensor("empty concat".into()))?);
        let rows = first.shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", first.shape(), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(&[rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::InvalidTensor("empty concat".into()))?);
        let cols = first.cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.ndim() != 2 || v.cols() != cols {
                return Err(Error::shape("concat_rows", first.shape(), v.shape()));
            }
            rows += v.shape()[0];
            out.extend_from_slice(v.data());
        }
        let value = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rectangular-diagonal map: `y[:, i] = diag[i] * x[:, i]` for
    /// `i < min(in, out)`, all other output columns zero.
    pub fn diag_embed(&mut self, x: Var, diag: Var, out_dim: usize) -> Result<Var> {
        let (vx, vd) = (self.value(x), self.value(diag));
        let in_dim = vx.cols();
        let k = in_dim.min(out_dim);
        if vd.numel() != k || out_dim == 0 {
            return Err(Error::shape("diag_embed", vx.shape(), vd.shape()));
        }
        let rows = vx.rows();
        let mut out = vec![S::zero(); rows * out_dim];
        for r in 0..rows {
            let src = &vx.data()[r * in_dim..r * in_dim + k];
            let dst = &mut out[r * out_dim..r * out_dim + k];
            for ((o, &s), &d) in dst.iter_mut().zip(src).zip(vd.data()) {
                *o = s * d;
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::DiagEmbed { x, diag }, &[x, diag]))
    }

    /// Inverted dropout. A rate of zero records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = S::from_f64_lossy(1.0 / (1.0 - rate));
        let vx = self.value(x);
        let mask: Vec<S> = (0..vx.numel())
            .map(|_| if rng.random::<f64>() < rate { S::zero() } else { keep })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(vx.shape(), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagates `d loss / d node` back through the tape and adds the
    /// result into every reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(g) = self.grads[i].as_mut() {
                    for (a, &d) in g.data_mut().iter_mut().zip(&dy) {
                        *a += d;
                    }
                }
                continue;
            }
            self.backprop_node(i, &dy, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, dy: &[S], adj: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b, ta, tb } => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let out_shape = node.value.shape();
                let (m, n) = (out_shape[0], out_shape[1]);
                if wants(*a) {
                    let buf = slot(adj, *a, va.numel());
                    // dA = dC * op(B)^T  (or its transpose when A enters transposed)
                    if !*ta {
                        gemm_acc((dy, m, n), false, mat(vb), !*tb, buf);
                    } else {
                        gemm_acc(mat(vb), *tb, (dy, m, n), true, buf);
                    }
                }
                if wants(*b) {
                    let buf = slot(adj, *b, vb.numel());
                    // dB = op(A)^T * dC  (or its transpose when B enters transposed)
                    if !*tb {
                        gemm_acc(mat(va), !*ta, (dy, m, n), false, buf);
                    } else {
                        gemm_acc((dy, m, n), true, mat(va), *ta, buf);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(slot(adj, v, dy.len()), dy);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    axpy(slot(adj, *x, dy.len()), dy);
                }
                if wants(*row) {
                    let n = nodes[row.0].value.numel();
                    let buf = slot(adj, *row, n);
                    for r in dy.chunks(n) {
                        axpy(buf, r);
                    }
                }
            }
            Op::Scale(x, f) => {
                let buf = slot(adj, *x, dy.len());
                for (g, &d) in buf.iter_mut().zip(dy) {
                    *g += d * *f;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    let buf = slot(adj, *a, dy.len());
                    for ((g, &d), &o) in buf.iter_mut().zip(dy).zip(vb) {
                        *g += d * o;
                    }
                }
                if wants(*b) {
                    let buf = slot(adj, *b, dy.len());
                    for ((g, &d), &o) in buf.iter_mut().zip(dy).zip(va) {
                        *g += d * o;
                    }
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                let buf = slot(adj, *x, dy.len());
                for i in 0..r {
                    for j in 0..c {
                        buf[j * r + i] += dy[i * c + j];
                    }
                }
            }
            Op::Relu(x) => {
                let vx = nodes[x.0].value.data();
                let buf = slot(adj, *x, dy.len());
                for ((g, &d), &v) in buf.iter_mut().zip(dy).zip(vx) {
                    if v > S::zero() {
                        *g += d;
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = nodes[x.0].value.data();
                let buf = slot(adj, *x, dy.len());
                for ((g, &d), &v) in buf.iter_mut().zip(dy).zip(vx) {
                    *g += d * gelu_fwd(v).1;
                }
            }
            Op::Softmax(x) => {
                let p = node.value.data();
                let n = node.value.cols();
                let buf = slot(adj, *x, dy.len());
                for ((g, d), p) in buf.chunks_mut(n).zip(dy.chunks(n)).zip(p.chunks(n)) {
                    let dot: S = d.iter().zip(p).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        g[j] += p[j] * (d[j] - dot);
                    }
                }
            }
            Op::MaskFill(x, allowed) => {
                let buf = slot(adj, *x, dy.len());
                for ((g, &d), &ok) in buf.iter_mut().zip(dy).zip(allowed.iter()) {
                    if ok {
                        *g += d;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let vg = nodes[gain.0].value.data();
                let n = vg.len();
                let n_s = S::from_usize(n).unwrap();
                if wants(*x) {
                    let buf = slot(adj, *x, dy.len());
                    for (r, ((g, d), h)) in buf
                        .chunks_mut(n)
                        .zip(dy.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut mean_d = S::zero();
                        let mut mean_dh = S::zero();
                        for j in 0..n {
                            let dh = d[j] * vg[j];
                            mean_d += dh;
                            mean_dh += dh * h[j];
                        }
                        mean_d = mean_d / n_s;
                        mean_dh = mean_dh / n_s;
                        for j in 0..n {
                            let dh = d[j] * vg[j];
                            g[j] += rstd[r] * (dh - mean_d - h[j] * mean_dh);
                        }
                    }
                }
                if wants(*gain) {
                    let buf = slot(adj, *gain, n);
                    for (d, h) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            buf[j] += d[j] * h[j];
                        }
                    }
                }
                if wants(*bias) {
                    let buf = slot(adj, *bias, n);
                    for d in dy.chunks(n) {
                        axpy(buf, d);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let vt = &nodes[table.0].value;
                let d = vt.cols();
                let buf = slot(adj, *table, vt.numel());
                for (k, &id) in ids.iter().enumerate() {
                    axpy(&mut buf[id * d..(id + 1) * d], &dy[k * d..(k + 1) * d]);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = nodes[logits.0].value.cols();
                let scale = dy[0] / S::from_usize(targets.len()).unwrap();
                let buf = slot(adj, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    let row = &probs[r * v..(r + 1) * v];
                    let g = &mut buf[r * v..(r + 1) * v];
                    for j in 0..v {
                        let onehot = if j == t { S::one() } else { S::zero() };
                        g[j] += scale * (row[j] - onehot);
                    }
                }
            }
            Op::Sum(x) => {
                let buf = slot(adj, *x, nodes[x.0].value.numel());
                for g in buf.iter_mut() {
                    *g += dy[0];
                }
            }
            Op::Slice { x, r0, c0 } => {
                let vx = &nodes[x.0].value;
                let c = vx.cols();
                let (nr, nc) = (node.value.shape()[0], node.value.shape()[1]);
                let buf = slot(adj, *x, vx.numel());
                for i in 0..nr {
                    let off = (r0 + i) * c + c0;
                    axpy(&mut buf[off..off + nc], &dy[i * nc..(i + 1) * nc]);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.shape()[0];
                let mut c0 = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if wants(p) {
                        let buf = slot(adj, p, rows * w);
                        for i in 0..rows {
                            axpy(&mut buf[i * w..(i + 1) * w], &dy[i * total + c0..i * total + c0 + w]);
                        }
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if wants(p) {
                        axpy(slot(adj, p, len), &dy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::DiagEmbed { x, diag } => {
                let vx = &nodes[x.0].value;
                let vd = nodes[diag.0].value.data();
                let (in_dim, out_dim, k) = (vx.cols(), node.value.cols(), vd.len());
                let rows = vx.rows();
                if wants(*x) {
                    let buf = slot(adj, *x, vx.numel());
                    for r in 0..rows {
                        for j in 0..k {
                            buf[r * in_dim + j] += dy[r * out_dim + j] * vd[j];
                        }
                    }
                }
                if wants(*diag) {
                    let buf = slot(adj, *diag, k);
                    for r in 0..rows {
                        for j in 0..k {
                            buf[j] += dy[r * out_dim + j] * vx.data()[r * in_dim + j];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let buf = slot(adj, *x, dy.len());
                for ((g, &d), &m) in buf.iter_mut().zip(dy).zip(mask) {
                    *g += d * m;
                }
            }
        }
    }
}

fn slot<S: Scalar>(adj: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut Vec<S> {
    adj[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn axpy<S: Scalar>(acc: &mut [S], x: &[S]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

type MatRef<'a, S> = (&'a [S], usize, usize);

fn mat<S: Scalar>(t: &Tensor<S>) -> MatRef<'_, S> {
    (t.data(), t.shape()[0], t.shape()[1])
}

/// `c += op(x) * op(y)` for row-major stored operands.
fn gemm_acc<S: Scalar>(x: MatRef<'_, S>, tx: bool, y: MatRef<'_, S>, ty: bool, c: &mut [S]) {
    let (xd, xr, xc) = x;
    let (yd, yr, yc) = y;
    let (m, k, rsx, csx) = if tx { (xc, xr, 1, xc) } else { (xr, xc, xc, 1) };
    let (n, rsy, csy) = if ty { (yr, 1, yc) } else { (yc, yc, 1) };
    S::gemm(m, k, n, S::one(), xd, rsx, csx, yd, rsy, csy, S::one(), c);
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

/// Returns `(gelu(v), gelu'(v))`.
fn gelu_fwd<S: Scalar>(v: S) -> (S, S) {
    let half = S::from_f64_lossy(0.5);
    let c = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64_lossy(0.044715);
    let three = S::from_f64_lossy(3.0);
    let inner = c * (v + k * v * v * v);
    let t = inner.tanh();
    let y = half * v * (S::one() + t);
    let dinner = c * (S::one() + three * k * v * v);
    let dy = half * (S::one() + t) + half * v * (S::one() - t * t) * dinner;
    (y, dy)
}
