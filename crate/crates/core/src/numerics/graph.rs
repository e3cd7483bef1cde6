//! Recorded computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, so independent graphs
//! (one per batch element) can run concurrently against the same weights.
//! Every op validates shapes, rejects non-finite results and records enough
//! state for its backward rule.

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Boolean attention permission matrix: `allow(q, k)` is true when query
/// `q` may attend to key `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allow.push(f(r, c));
            }
        }
        AttnMask { rows, cols, allow }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        AttnMask {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    /// Standard decoder mask: position `q` sees keys `0..=q`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |q, k| k <= q)
    }

    pub fn from_vec(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::Shape {
                op: "attn_mask",
                lhs: vec![rows, cols],
                rhs: vec![allow.len()],
            });
        }
        Ok(AttnMask { rows, cols, allow })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.allow[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Reshape(Var),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    tracked_inputs: Vec<usize>,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

// libm tanhf is several times slower than expf; this form saturates
// cleanly to ±1 when exp over/underflows.
fn fast_tanh(u: f32) -> f32 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            tracked_inputs: Vec::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Input, false)
    }

    /// Input whose gradient is reported by [`Gradients::input`].
    pub fn input_tracked(&mut self, t: Tensor) -> Result<Var> {
        let v = self.push("input", t, Op::Input, true)?;
        self.tracked_inputs.push(v.0);
        Ok(v)
    }

    /// Parameter leaf. The value is borrowed from the store; non-trainable
    /// parameters are treated as constants (stop-gradient).
    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        self.nodes.push(Node {
            value: Value::Borrowed(&p.value),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let rg = self.requires(a) || self.requires(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[r, c] + bias[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (d, b) in row.iter_mut().zip(tb.data()) {
                *d += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.requires(x) || self.requires(bias);
        self.push("add_row", out, Op::AddRow(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * s).collect())?;
        let rg = self.requires(x);
        self.push("scale", out, Op::Scale(x, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| gelu(v)).collect())?;
        let rg = self.requires(x);
        self.push("gelu", out, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.numel() != c || tb.numel() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Row-wise softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.requires(x);
        self.push("softmax", out, Op::Softmax(x), rg)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[n, d]`, `k` and `v` are `[m, d]`; heads split `d` evenly.
    /// Keys forbidden by `mask` get exactly zero weight and take no part in
    /// the softmax normalizer. `mask = None` permits every key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&AttnMask>,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d, m) = (tq.rows(), tq.cols(), tk.rows());
        if tk.cols() != d || tv.cols() != d || tv.rows() != m {
            return Err(shape_err("attention", tq, tk));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} channels not divisible into {heads} heads")));
        }
        if let Some(mask) = mask {
            if mask.rows() != n || mask.cols() != m {
                return Err(Error::Shape {
                    op: "attention_mask",
                    lhs: vec![n, m],
                    rhs: vec![mask.rows(), mask.cols()],
                });
            }
            for r in 0..n {
                if !mask.allow[r * m..(r + 1) * m].iter().any(|&a| a) {
                    return Err(Error::FullyMaskedRow { row: r });
                }
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        let mut qh = vec![0.0; n * dh];
        let mut kh = vec![0.0; m * dh];
        let mut vh = vec![0.0; m * dh];
        let mut oh = vec![0.0; n * dh];
        for h in 0..heads {
            split_head(tq.data(), d, h, dh, &mut qh);
            split_head(tk.data(), d, h, dh, &mut kh);
            split_head(tv.data(), d, h, dh, &mut vh);
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(n, dh, m, &qh, false, &kh, true, p, 0.0);
            for r in 0..n {
                let row = &mut p[r * m..(r + 1) * m];
                let allow = mask.map(|mk| &mk.allow[r * m..(r + 1) * m]);
                masked_softmax_row(row, allow, scale);
            }
            gemm(n, m, dh, p, false, &vh, false, &mut oh, 0.0);
            merge_head(&oh, d, h, dh, &mut out);
        }
        let out = Tensor::new(vec![n, d], out)?;
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Attention weights `[heads, n, m]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f32], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, heads, .. } => Some((probs, *heads)),
            _ => None,
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if start + len > tx.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = Tensor::new(vec![len, c], tx.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.requires(x);
        self.push("slice_rows", out, Op::SliceRows { x, start }, rg)
    }

    /// Selects rows by index (repeats allowed). Embedding lookup is a
    /// gather over the table parameter.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= tx.rows() {
                return Err(Error::Shape {
                    op: "gather_rows",
                    lhs: tx.shape().to_vec(),
                    rhs: vec![i],
                });
            }
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.requires(x);
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn embedding(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = self.param(table);
        self.gather_rows(t, ids)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f32>();
        let rg = self.requires(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.data().iter().sum::<f32>() / tx.numel().max(1) as f32;
        let rg = self.requires(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse", ta, tb));
        }
        let n = ta.numel().max(1) as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        let rg = self.requires(a) || self.requires(b);
        self.push("mse", Tensor::scalar((s / n) as f32), Op::Mse(a, b), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires(x);
        self.push("reshape", out, Op::Reshape(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let tl = self.value(loss);
        if !tl.is_scalar() {
            return Err(Error::NotScalar(tl.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(tl.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {
                    out.inputs.push((i, g));
                }
                Op::Param(id) => {
                    out.params.push((*id, g));
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.requires(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, 0.0);
                        self.acc(&mut grads, *a, da);
                    }
                    if self.requires(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, 0.0);
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires(*a) {
                        self.acc(&mut grads, *a, g.data().to_vec());
                    }
                    if self.requires(*b) {
                        self.acc(&mut grads, *b, g.data().to_vec());
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires(*a) {
                        self.acc(&mut grads, *a, g.data().to_vec());
                    }
                    if self.requires(*b) {
                        self.acc(&mut grads, *b, g.data().iter().map(|x| -x).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.requires(*a) {
                        let d = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                        self.acc(&mut grads, *a, d);
                    }
                    if self.requires(*b) {
                        let d = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                        self.acc(&mut grads, *b, d);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.requires(*x) {
                        self.acc(&mut grads, *x, g.data().to_vec());
                    }
                    if self.requires(*bias) {
                        let c = g.cols();
                        let mut db = vec![0.0; c];
                        for row in g.data().chunks(c) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc(&mut grads, *bias, db);
                    }
                }
                Op::Scale(x, s) => {
                    let d = g.data().iter().map(|v| v * s).collect();
                    self.acc(&mut grads, *x, d);
                }
                Op::Gelu(x) => {
                    let tx = self.value(*x);
                    let d = g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(g, &v)| g * gelu_grad(v))
                        .collect();
                    self.acc(&mut grads, *x, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let tg = self.value(*gamma);
                    let c = g.cols();
                    let rows = g.rows();
                    if self.requires(*x) {
                        let mut dx = vec![0.0; rows * c];
                        for r in 0..rows {
                            let gr = &g.data()[r * c..(r + 1) * c];
                            let hr = &xhat[r * c..(r + 1) * c];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..c {
                                let dh = gr[j] * tg.data()[j];
                                m1 += dh;
                                m2 += dh * hr[j];
                            }
                            m1 /= c as f32;
                            m2 /= c as f32;
                            for j in 0..c {
                                let dh = gr[j] * tg.data()[j];
                                dx[r * c + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                            }
                        }
                        self.acc(&mut grads, *x, dx);
                    }
                    if self.requires(*gamma) {
                        let mut dg = vec![0.0; c];
                        for (gr, hr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                        self.acc(&mut grads, *gamma, dg);
                    }
                    if self.requires(*beta) {
                        let mut db = vec![0.0; c];
                        for gr in g.data().chunks(c) {
                            for j in 0..c {
                                db[j] += gr[j];
                            }
                        }
                        self.acc(&mut grads, *beta, db);
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.get();
                    let c = y.cols();
                    let mut dx = vec![0.0; y.numel()];
                    for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, probs, &g);
                    if self.requires(*q) {
                        self.acc(&mut grads, *q, dq);
                    }
                    if self.requires(*k) {
                        self.acc(&mut grads, *k, dk);
                    }
                    if self.requires(*v) {
                        self.acc(&mut grads, *v, dv);
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).rows() * c;
                        if self.requires(p) {
                            self.acc(&mut grads, p, g.data()[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let mut dx = vec![0.0; tx.numel()];
                    dx[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    self.acc(&mut grads, *x, dx);
                }
                Op::GatherRows { x, idx } => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let mut dx = vec![0.0; tx.numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            dx[i * c + j] += g.data()[r * c + j];
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    self.acc(&mut grads, *x, vec![g.data()[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).numel();
                    self.acc(&mut grads, *x, vec![g.data()[0] / n as f32; n]);
                }
                Op::Mse(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let s = 2.0 * g.data()[0] / ta.numel().max(1) as f32;
                    let d: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| s * (x - y)).collect();
                    if self.requires(*b) {
                        self.acc(&mut grads, *b, d.iter().map(|v| -v).collect());
                    }
                    if self.requires(*a) {
                        self.acc(&mut grads, *a, d);
                    }
                }
                Op::Reshape(x) => {
                    self.acc(&mut grads, *x, g.into_data());
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, d: Vec<f32>) {
        let shape = self.value(v).shape();
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&d) {
                    *a += b;
                }
            }
            slot => {
                *slot = Some(Tensor::new(shape.to_vec(), d).expect("gradient shape"));
            }
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f32],
        g: &Tensor,
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d, m) = (tq.rows(), tq.cols(), tk.rows());
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (mut dq, mut dk, mut dv) = (vec![0.0; n * d], vec![0.0; m * d], vec![0.0; m * d]);
        let mut qh = vec![0.0; n * dh];
        let mut kh = vec![0.0; m * dh];
        let mut vh = vec![0.0; m * dh];
        let mut gh = vec![0.0; n * dh];
        let mut dp = vec![0.0; n * m];
        let mut tmp_n = vec![0.0; n * dh];
        let mut tmp_m = vec![0.0; m * dh];
        for h in 0..heads {
            split_head(tq.data(), d, h, dh, &mut qh);
            split_head(tk.data(), d, h, dh, &mut kh);
            split_head(tv.data(), d, h, dh, &mut vh);
            split_head(g.data(), d, h, dh, &mut gh);
            let p = &probs[h * n * m..(h + 1) * n * m];
            // dV = P^T dO
            gemm(m, n, dh, p, true, &gh, false, &mut tmp_m, 0.0);
            merge_head(&tmp_m, d, h, dh, &mut dv);
            // dP = dO V^T ; dS = P * (dP - rowdot(dP, P)) * scale
            gemm(n, dh, m, &gh, false, &vh, true, &mut dp, 0.0);
            for r in 0..n {
                let pr = &p[r * m..(r + 1) * m];
                let dr = &mut dp[r * m..(r + 1) * m];
                let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            // dQ = dS K ; dK = dS^T Q
            gemm(n, m, dh, &dp, false, &kh, false, &mut tmp_n, 0.0);
            merge_head(&tmp_n, d, h, dh, &mut dq);
            gemm(m, n, dh, &dp, true, &qh, false, &mut tmp_m, 0.0);
            merge_head(&tmp_m, d, h, dh, &mut dk);
        }
        (dq, dk, dv)
    }
}

fn split_head(src: &[f32], d: usize, h: usize, dh: usize, dst: &mut [f32]) {
    for (r, chunk) in dst.chunks_mut(dh).enumerate() {
        chunk.copy_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
}

fn merge_head(src: &[f32], d: usize, h: usize, dh: usize, dst: &mut [f32]) {
    for (r, chunk) in src.chunks(dh).enumerate() {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(chunk);
    }
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Softmax of `scale * row` restricted to permitted entries; forbidden
/// entries become exactly 0 and do not enter the max or the normalizer.
fn masked_softmax_row(row: &mut [f32], allow: Option<&[bool]>, scale: f32) {
    let permitted = |j: usize| allow.is_none_or(|a| a[j]);
    let mut max = f32::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if permitted(j) {
            max = max.max(x * scale);
        }
    }
    let mut sum = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if permitted(j) {
            *x = (*x * scale - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
