//! Reverse-mode automatic differentiation over a topologically ordered tape.
//!
//! Nodes are appended in evaluation order, so the tape is acyclic by
//! construction and `backward` is a single reverse sweep. Backward caches
//! (softmax probabilities, reciprocal RMS values) are only retained when the
//! node participates in gradient flow.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels;
use super::scalar::{gemm, MatMut, MatRef};
use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Multi-head attention geometry for [`Graph::attention`]. `mask` is the
/// row-major `seq_len x seq_len` visibility tile shared by every sequence in
/// the batch and every head.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub seq_len: usize,
    pub mask: Arc<[bool]>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Sigmoid(Var),
    Silu(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Transpose(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    GateMix {
        g: Var,
        a: Var,
        b: Var,
    },
    WeightedSum {
        weights: Var,
        xs: Vec<Var>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// A computation tape. One tape is written by one owner; build a fresh tape
/// per training step.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by the last backward pass; `None` when no
    /// path from the loss reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient on `v`, zero-filled when the loss does not depend on it.
    pub fn grad_or_zero(&self, v: Var) -> Vec<T> {
        self.grad(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.value(v).numel()])
    }

    fn push(&mut self, value: Tensor<T>, name: &'static str, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(mismatch("matmul", format!("[{n},{k}] x [{k2},{m}]")));
        }
        let out = kernels::matmul(self.value(a).data(), n, k, self.value(b).data(), m);
        self.push(Tensor::new(vec![n, m], out)?, "matmul", &[a, b], Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, "add", &[a, b], Op::Add(a, b))
    }

    /// Adds a bias row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(bias).numel() != c {
            return Err(mismatch(
                "add_row",
                format!("{} columns vs bias of {}", c, self.value(bias).numel()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            kernels::add_assign(row, &b);
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, "add_row", &[x, bias], Op::AddRow(x, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(
                "mul",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, "mul", &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, "scale", &[x], Op::Scale(x, c))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange(format!(
                "embedding id {bad} for table of {rows} rows"
            )));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            "embedding",
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(gain).numel() != c {
            return Err(mismatch("rms_norm", format!("{c} columns vs gain of {}", self.value(gain).numel())));
        }
        let mut out = vec![T::zero(); self.value(x).numel()];
        let inv = kernels::rms_norm(self.value(x).data(), self.value(gain).data(), &mut out);
        let keep = self.any_grad(&[x, gain]);
        let shape = self.value(x).shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            "rms_norm",
            &[x, gain],
            Op::RmsNorm {
                x,
                gain,
                inv_rms: if keep { inv } else { Vec::new() },
            },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, "sigmoid", &[x], Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| kernels::silu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, "silu", &[x], Op::Silu(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            kernels::softmax_row(row);
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, "softmax", &[x], Op::Softmax(x))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.dims(xs[0]).0;
        if xs.iter().any(|&x| self.dims(x).0 != rows) {
            return Err(mismatch("concat", "row counts differ".into()));
        }
        let total: usize = xs.iter().map(|&x| self.dims(x).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        self.push(Tensor::new(vec![rows, total], out)?, "concat", xs, Op::Concat(xs.to_vec()))
    }

    /// Concatenation along the leading (row) axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.dims(xs[0]).1;
        if xs.iter().any(|&x| self.dims(x).1 != cols) {
            return Err(mismatch("concat_rows", "column counts differ".into()));
        }
        let mut out = Vec::new();
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        let rows = out.len() / cols;
        self.push(
            Tensor::new(vec![rows, cols], out)?,
            "concat_rows",
            xs,
            Op::ConcatRows(xs.to_vec()),
        )
    }

    /// Columns `start .. start + len` of every row.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, c) = self.dims(x);
        if start + len > c {
            return Err(Error::IndexOutOfRange(format!("slice {start}+{len} of {c} columns")));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(Tensor::new(vec![rows, len], out)?, "slice", &[x], Op::Slice { x, start })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange(format!("row {bad} of {rows}")));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            "gather_rows",
            &[x],
            Op::GatherRows { x, idx: idx.to_vec() },
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let t = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, "transpose", &[x], Op::Transpose(x))
    }

    /// Mean cross-entropy of `logits` rows against target class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims(logits);
        if targets.len() != n || n == 0 {
            return Err(mismatch("cross_entropy", format!("{n} rows vs {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::IndexOutOfRange(format!("target {bad} of {v} classes")));
        }
        let z = self.value(logits);
        let mut total = T::zero();
        let keep = self.any_grad(&[logits]);
        let mut probs = if keep { Vec::with_capacity(n * v) } else { Vec::new() };
        for (r, &t) in targets.iter().enumerate() {
            let row = z.row(r);
            let lse = kernels::log_sum_exp(row);
            total += lse - row[t];
            if keep {
                probs.extend(row.iter().map(|&x| (x - lse).exp()));
            }
        }
        let loss = total / T::of(n as f64);
        self.push(
            Tensor::scalar(loss),
            "cross_entropy",
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Masked scaled dot-product attention over `[batch * seq_len, heads * head_dim]`
    /// query/key/value matrices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (rows, d) = self.dims(q);
        let s = spec.seq_len;
        if self.dims(k) != (rows, d) || self.dims(v) != (rows, d) {
            return Err(mismatch("attention", "q/k/v shapes differ".into()));
        }
        if s == 0 || rows % s != 0 || d % spec.heads != 0 || spec.mask.len() != s * s {
            return Err(mismatch(
                "attention",
                format!("rows {rows}, width {d}, seq {s}, heads {}, mask {}", spec.heads, spec.mask.len()),
            ));
        }
        let batch = rows / s;
        let hd = d / spec.heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let keep = self.any_grad(&[q, k, v]);
        let mut probs = if keep {
            vec![T::zero(); batch * spec.heads * s * s]
        } else {
            Vec::new()
        };
        let mut scratch = vec![T::zero(); s * s];
        let mut out = vec![T::zero(); rows * d];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..batch {
            for h in 0..spec.heads {
                let off = b * s * d + h * hd;
                let p = if keep {
                    let base = (b * spec.heads + h) * s * s;
                    &mut probs[base..base + s * s]
                } else {
                    &mut scratch[..]
                };
                let qm = MatRef { data: &qd[off..], rows: s, cols: hd, rs: d, cs: 1 };
                let km = MatRef { data: &kd[off..], rows: s, cols: hd, rs: d, cs: 1 };
                let vm = MatRef { data: &vd[off..], rows: s, cols: hd, rs: d, cs: 1 };
                gemm(scale, qm, km.t(), T::zero(), MatMut::row_major(p, s, s));
                masked_softmax(p, &spec.mask, s);
                gemm(
                    T::one(),
                    MatRef::row_major(p, s, s),
                    vm,
                    T::zero(),
                    MatMut { data: &mut out[off..], rows: s, cols: hd, rs: d, cs: 1 },
                );
            }
        }
        let shape = self.value(q).shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            "attention",
            &[q, k, v],
            Op::Attention { q, k, v, spec, probs },
        )
    }

    /// `g * a + (1 - g) * b` with a per-row scalar gate `g` of shape `[n, 1]`.
    pub fn gate_mix(&mut self, g: Var, a: Var, b: Var) -> Result<Var> {
        let (n, c) = self.dims(a);
        if self.dims(b) != (n, c) || self.value(g).numel() != n {
            return Err(mismatch("gate_mix", format!("gate {:?}, a {:?}, b {:?}",
                self.value(g).shape(), self.value(a).shape(), self.value(b).shape())));
        }
        let gv = self.value(g).data();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * c);
        for r in 0..n {
            let gr = gv[r];
            let one_minus = T::one() - gr;
            for j in 0..c {
                out.push(gr * ad[r * c + j] + one_minus * bd[r * c + j]);
            }
        }
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, "gate_mix", &[g, a, b], Op::GateMix { g, a, b })
    }

    /// `sum_l weights[l] * xs[l]` for same-shaped `xs`.
    pub fn weighted_sum(&mut self, weights: Var, xs: &[Var]) -> Result<Var> {
        if self.value(weights).numel() != xs.len() || xs.is_empty() {
            return Err(mismatch("weighted_sum", format!("{} weights for {} inputs",
                self.value(weights).numel(), xs.len())));
        }
        let shape = self.value(xs[0]).shape().to_vec();
        if xs.iter().any(|&x| self.value(x).shape() != shape.as_slice()) {
            return Err(mismatch("weighted_sum", "input shapes differ".into()));
        }
        let mut out = vec![T::zero(); self.value(xs[0]).numel()];
        for (l, &x) in xs.iter().enumerate() {
            let w = self.value(weights).data()[l];
            for (o, &v) in out.iter_mut().zip(self.value(x).data()) {
                *o += w * v;
            }
        }
        let mut inputs = vec![weights];
        inputs.extend_from_slice(xs);
        self.push(
            Tensor::new(shape, out)?,
            "weighted_sum",
            &inputs,
            Op::WeightedSum { weights, xs: xs.to_vec() },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), "sum", &[x], Op::Sum(x))
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => kernels::add_assign(acc, &g),
            None => node.grad = Some(g),
        }
    }

    /// Populates gradients of the scalar `loss` on every node that requires
    /// them. Intermediate gradients are released after use; leaf gradients
    /// are kept for [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(Var(i), &op, &dy);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn backprop(&mut self, out: Var, op: &Op<T>, dy: &[T]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); n * k];
                    gemm(
                        T::one(),
                        MatRef::row_major(dy, n, m),
                        MatRef::row_major(self.value(*b).data(), k, m).t(),
                        T::zero(),
                        MatMut::row_major(&mut da, n, k),
                    );
                    self.accumulate(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * m];
                    gemm(
                        T::one(),
                        MatRef::row_major(self.value(*a).data(), n, k).t(),
                        MatRef::row_major(dy, n, m),
                        T::zero(),
                        MatMut::row_major(&mut db, k, m),
                    );
                    self.accumulate(*b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, dy.to_vec());
                self.accumulate(*b, dy.to_vec());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(*x, dy.to_vec());
                if self.requires_grad(*bias) {
                    let c = self.value(*bias).numel();
                    let mut db = vec![T::zero(); c];
                    for row in dy.chunks_exact(c) {
                        kernels::add_assign(&mut db, row);
                    }
                    self.accumulate(*bias, db);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let da = dy.iter().zip(self.value(*b).data()).map(|(&g, &v)| g * v).collect();
                    self.accumulate(*a, da);
                }
                if self.requires_grad(*b) {
                    let db = dy.iter().zip(self.value(*a).data()).map(|(&g, &v)| g * v).collect();
                    self.accumulate(*b, db);
                }
            }
            Op::Scale(x, c) => {
                let dx = dy.iter().map(|&g| g * *c).collect();
                self.accumulate(*x, dx);
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let (rows, d) = self.dims(*table);
                    let mut dt = vec![T::zero(); rows * d];
                    for (r, &i) in ids.iter().enumerate() {
                        kernels::add_assign(&mut dt[i * d..(i + 1) * d], &dy[r * d..(r + 1) * d]);
                    }
                    self.accumulate(*table, dt);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let c = self.value(*gain).numel();
                let n = T::of(c as f64);
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let mut dx = vec![T::zero(); xd.len()];
                let mut dg = vec![T::zero(); c];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &xd[r * c..(r + 1) * c];
                    let dyr = &dy[r * c..(r + 1) * c];
                    let dot: T = (0..c).map(|j| dyr[j] * gd[j] * xr[j]).sum();
                    let coef = inv * inv * inv * dot / n;
                    for j in 0..c {
                        dx[r * c + j] = inv * gd[j] * dyr[j] - coef * xr[j];
                        dg[j] += dyr[j] * xr[j] * inv;
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gain, dg);
            }
            Op::Sigmoid(x) => {
                let y = self.value(out).data();
                let dx = dy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.accumulate(*x, dx);
            }
            Op::Silu(x) => {
                let xd = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| {
                        let s = kernels::sigmoid(v);
                        g * (s + v * s * (T::one() - s))
                    })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Softmax(x) => {
                let c = self.dims(out).1;
                let y = self.value(out).data();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks_exact(c).zip(dy.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Concat(xs) => {
                let (rows, total) = self.dims(out);
                let mut start = 0;
                for &x in xs {
                    let c = self.dims(x).1;
                    if self.requires_grad(x) {
                        let mut dx = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dx.extend_from_slice(&dy[r * total + start..r * total + start + c]);
                        }
                        self.accumulate(x, dx);
                    }
                    start += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut start = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    if self.requires_grad(x) {
                        self.accumulate(x, dy[start..start + n].to_vec());
                    }
                    start += n;
                }
            }
            Op::Slice { x, start } => {
                let (rows, c) = self.dims(*x);
                let len = self.dims(out).1;
                let mut dx = vec![T::zero(); rows * c];
                for r in 0..rows {
                    dx[r * c + start..r * c + start + len].copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                self.accumulate(*x, dx);
            }
            Op::GatherRows { x, idx } => {
                let (rows, c) = self.dims(*x);
                let mut dx = vec![T::zero(); rows * c];
                for (r, &i) in idx.iter().enumerate() {
                    kernels::add_assign(&mut dx[i * c..(i + 1) * c], &dy[r * c..(r + 1) * c]);
                }
                self.accumulate(*x, dx);
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims(*x);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dy[j * r + i];
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.dims(*logits).1;
                let scale = dy[0] / T::of(targets.len() as f64);
                let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dz[r * v + t] -= scale;
                }
                self.accumulate(*logits, dz);
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (rows, d) = self.dims(*q);
                let s = spec.seq_len;
                let batch = rows / s;
                let hd = d / spec.heads;
                let scale = T::one() / T::of(hd as f64).sqrt();
                let mut dq = vec![T::zero(); rows * d];
                let mut dk = vec![T::zero(); rows * d];
                let mut dv = vec![T::zero(); rows * d];
                let mut dp = vec![T::zero(); s * s];
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                for b in 0..batch {
                    for h in 0..spec.heads {
                        let off = b * s * d + h * hd;
                        let base = (b * spec.heads + h) * s * s;
                        let p = &probs[base..base + s * s];
                        let dom = MatRef { data: &dy[off..], rows: s, cols: hd, rs: d, cs: 1 };
                        let qm = MatRef { data: &qd[off..], rows: s, cols: hd, rs: d, cs: 1 };
                        let km = MatRef { data: &kd[off..], rows: s, cols: hd, rs: d, cs: 1 };
                        let vm = MatRef { data: &vd[off..], rows: s, cols: hd, rs: d, cs: 1 };
                        // dV = P^T dO
                        gemm(
                            T::one(),
                            MatRef::row_major(p, s, s).t(),
                            dom,
                            T::zero(),
                            MatMut { data: &mut dv[off..], rows: s, cols: hd, rs: d, cs: 1 },
                        );
                        // dP = dO V^T, then softmax backward into dS (in place)
                        gemm(T::one(), dom, vm.t(), T::zero(), MatMut::row_major(&mut dp, s, s));
                        for (pr, dr) in p.chunks_exact(s).zip(dp.chunks_exact_mut(s)) {
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &g)| a * g).sum();
                            for (g, &a) in dr.iter_mut().zip(pr) {
                                *g = a * (*g - dot);
                            }
                        }
                        gemm(
                            scale,
                            MatRef::row_major(&dp, s, s),
                            km,
                            T::zero(),
                            MatMut { data: &mut dq[off..], rows: s, cols: hd, rs: d, cs: 1 },
                        );
                        gemm(
                            scale,
                            MatRef::row_major(&dp, s, s).t(),
                            qm,
                            T::zero(),
                            MatMut { data: &mut dk[off..], rows: s, cols: hd, rs: d, cs: 1 },
                        );
                    }
                }
                self.accumulate(*q, dq);
                self.accumulate(*k, dk);
                self.accumulate(*v, dv);
            }
            Op::GateMix { g, a, b } => {
                let (n, c) = self.dims(*a);
                let gv = self.value(*g).data().to_vec();
                if self.requires_grad(*g) {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    let dg = (0..n)
                        .map(|r| (0..c).map(|j| dy[r * c + j] * (ad[r * c + j] - bd[r * c + j])).sum())
                        .collect();
                    self.accumulate(*g, dg);
                }
                if self.requires_grad(*a) {
                    let da = (0..n * c).map(|i| gv[i / c] * dy[i]).collect();
                    self.accumulate(*a, da);
                }
                if self.requires_grad(*b) {
                    let db = (0..n * c).map(|i| (T::one() - gv[i / c]) * dy[i]).collect();
                    self.accumulate(*b, db);
                }
            }
            Op::WeightedSum { weights, xs } => {
                let w = self.value(*weights).data().to_vec();
                if self.requires_grad(*weights) {
                    let dw = xs
                        .iter()
                        .map(|&x| self.value(x).data().iter().zip(dy).map(|(&a, &g)| a * g).sum())
                        .collect();
                    self.accumulate(*weights, dw);
                }
                for (l, &x) in xs.iter().enumerate() {
                    if self.requires_grad(x) {
                        let dx = dy.iter().map(|&g| g * w[l]).collect();
                        self.accumulate(x, dx);
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![dy[0]; n]);
            }
        }
    }
}

/// Softmax over the allowed entries of each row; disallowed entries become 0.
fn masked_softmax<T: Scalar>(p: &mut [T], mask: &[bool], s: usize) {
    for (row, m) in p.chunks_exact_mut(s).zip(mask.chunks_exact(s)) {
        let mut max = T::neg_infinity();
        for (&v, &ok) in row.iter().zip(m) {
            if ok && v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (v, &ok) in row.iter_mut().zip(m) {
            *v = if ok { (*v - max).exp() } else { T::zero() };
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}
