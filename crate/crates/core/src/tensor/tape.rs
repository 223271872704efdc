//! Operation tape and reverse-mode gradients.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Ops append
//! nodes in topological order; [`Tape::backward`] walks the node list in
//! reverse, accumulating gradients by summation wherever a value fans out.
//! Inputs needed by a backward rule are read from the stored parent
//! values (saved activations); nothing is recomputed except cheap
//! per-row statistics that are cached in the node itself.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// GELU (tanh approximation) of a scalar.
pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

// ── Raw matrix kernels ──────────────────────────────────────────────────
// All kernels accumulate into `out` so backward can sum fan-in directly.

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] · b[k,n]ᵀ`
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

// ── Tape nodes ──────────────────────────────────────────────────────────

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a * x + b` with scalar constants; only `a` matters for gradients.
    Affine {
        x: usize,
        a: f64,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Transpose(usize),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    AddRow {
        x: usize,
        row: usize,
    },
    MulRow {
        x: usize,
        row: usize,
    },
    SoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gamma: usize,
        beta: usize,
        /// Per-row mean and reciprocal std cached at forward time.
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    LayerNormPlain {
        x: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    MeanAll(usize),
    SumAll(usize),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no gradient flowed to it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records a forward computation; one per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value held at `v`.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Register a differentiable input (model parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Register a non-differentiable input (data, frozen weights).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("shapes {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .as_slice()
            .iter()
            .zip(self.value(b).as_slice())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .as_slice()
            .iter()
            .zip(self.value(b).as_slice())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .as_slice()
            .iter()
            .zip(self.value(b).as_slice())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Mul(a.0, b.0)))
    }

    /// Elementwise `a * x + b` with scalar constants.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(x).as_slice().iter().map(|v| a * v + b).collect();
        let t = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Affine { x: x.0, a }))
    }

    // ── Matrix ops ──────────────────────────────────────────────────────

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::dim(op, format!("expected rank-2 tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions disagree: [{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(
            self.value(a).as_slice(),
            self.value(b).as_slice(),
            m,
            k,
            n,
            &mut out,
        );
        let t = Tensor::matrix(m, n, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims("transpose", x)?;
        let src = self.value(x).as_slice();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Transpose(x.0)))
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(Error::dim(
                "slice_cols",
                format!("range {start}..{} out of {n} columns", start + len),
            ));
        }
        let src = self.value(x).as_slice();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let t = Tensor::matrix(m, len, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::SliceCols { x: x.0, start, len }))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::param("concat_cols", "no parts given"));
        }
        let (rows, _) = self.mat_dims("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims("concat_cols", p)?;
            if r != rows {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row counts disagree: {rows} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).as_slice();
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            t,
            rg,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    fn row_len(&self, op: &'static str, row: Var, cols: usize) -> Result<()> {
        let n = self.value(row).numel();
        if n != cols {
            return Err(Error::dim(
                op,
                format!("row has {n} elements, matrix has {cols} columns"),
            ));
        }
        Ok(())
    }

    /// Add a length-`cols` row vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.mat_dims("add_row", x)?;
        self.row_len("add_row", row, n)?;
        let src = self.value(x).as_slice();
        let r = self.value(row).as_slice();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(src[i * n + j] + r[j]);
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, rg, Op::AddRow { x: x.0, row: row.0 }))
    }

    /// Multiply every row of a matrix elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.mat_dims("mul_row", x)?;
        self.row_len("mul_row", row, n)?;
        let src = self.value(x).as_slice();
        let r = self.value(row).as_slice();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(src[i * n + j] * r[j]);
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, rg, Op::MulRow { x: x.0, row: row.0 }))
    }

    // ── Fused nonlinear ops ─────────────────────────────────────────────

    /// Row-wise softmax with max subtraction; rows sum to one and no
    /// intermediate overflows for any finite input.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims("softmax_rows", x)?;
        let src = self.value(x).as_slice();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - hi).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::SoftmaxRows(x.0)))
    }

    fn row_stats(src: &[f64], m: usize, n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let denom = (var + eps).sqrt();
            // A constant row with eps = 0 normalizes to zero by convention.
            let rstd = if denom == 0.0 { 0.0 } else { 1.0 / denom };
            means.push(mean);
            rstds.push(rstd);
        }
        (means, rstds)
    }

    /// Row-wise layer normalization with affine parameters:
    /// `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps < 0.0 {
            return Err(Error::param("layer_norm_rows", "eps must be >= 0"));
        }
        let (m, n) = self.mat_dims("layer_norm_rows", x)?;
        self.row_len("layer_norm_rows", gamma, n)?;
        self.row_len("layer_norm_rows", beta, n)?;
        let src = self.value(x).as_slice();
        let (means, rstds) = Self::row_stats(src, m, n, eps);
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let xh = (src[i * n + j] - means[i]) * rstds[i];
                out.push(g[j] * xh + b[j]);
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            rg,
            Op::LayerNormRows {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm_plain(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps < 0.0 {
            return Err(Error::param("layer_norm_plain", "eps must be >= 0"));
        }
        let (m, n) = self.mat_dims("layer_norm_plain", x)?;
        let src = self.value(x).as_slice();
        let (means, rstds) = Self::row_stats(src, m, n, eps);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push((src[i * n + j] - means[i]) * rstds[i]);
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            rg,
            Op::LayerNormPlain {
                x: x.0,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Elementwise GELU (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self
            .value(x)
            .as_slice()
            .iter()
            .map(|&v| gelu_scalar(v))
            .collect();
        let t = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Gelu(x.0)))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).as_slice().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::SumAll(x.0)))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s: f64 = self.value(x).as_slice().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s / n as f64), rg, Op::MeanAll(x.0)))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Consumes the tape;
    /// gradients for all `requires_grad` nodes reachable from `loss` are
    /// returned, summed across fan-out.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            ));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out_shape = nodes[i].value.shape().to_vec();

            // Reusable accessor for parent buffers.
            let val = |id: usize| nodes[id].value.as_slice();
            let needs = |id: usize| nodes[id].requires_grad;
            let numel = |id: usize| nodes[id].value.numel();
            macro_rules! buf {
                ($id:expr) => {
                    grads[$id].get_or_insert_with(|| vec![0.0; numel($id)])
                };
            }

            match &nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep: leaves report their gradient
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        for (o, &gv) in buf!(*a).iter_mut().zip(&g) {
                            *o += gv;
                        }
                    }
                    if needs(*b) {
                        for (o, &gv) in buf!(*b).iter_mut().zip(&g) {
                            *o += gv;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        for (o, &gv) in buf!(*a).iter_mut().zip(&g) {
                            *o += gv;
                        }
                    }
                    if needs(*b) {
                        for (o, &gv) in buf!(*b).iter_mut().zip(&g) {
                            *o -= gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let bv = val(*b);
                        for ((o, &gv), &b_) in buf!(*a).iter_mut().zip(&g).zip(bv) {
                            *o += gv * b_;
                        }
                    }
                    if needs(*b) {
                        let av = val(*a);
                        for ((o, &gv), &a_) in buf!(*b).iter_mut().zip(&g).zip(av) {
                            *o += gv * a_;
                        }
                    }
                }
                Op::Affine { x, a } => {
                    if needs(*x) {
                        let a = *a;
                        for (o, &gv) in buf!(*x).iter_mut().zip(&g) {
                            *o += a * gv;
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let n = out_shape[1];
                    if needs(*a) {
                        let bv = val(*b);
                        matmul_nt_acc(&g, bv, m, n, k, buf!(*a));
                    }
                    if needs(*b) {
                        let av = val(*a);
                        matmul_tn_acc(av, &g, m, k, n, buf!(*b));
                    }
                }
                Op::Transpose(x) => {
                    if needs(*x) {
                        let (n, m) = (out_shape[0], out_shape[1]);
                        // g has shape [n, m]; parent is [m, n].
                        let gx = buf!(*x);
                        for j in 0..n {
                            for i2 in 0..m {
                                gx[i2 * n + j] += g[j * m + i2];
                            }
                        }
                    }
                }
                Op::SliceCols { x, start, len } => {
                    if needs(*x) {
                        let rows = out_shape[0];
                        let n = nodes[*x].value.shape()[1];
                        let gx = buf!(*x);
                        for r in 0..rows {
                            for c in 0..*len {
                                gx[r * n + start + c] += g[r * len + c];
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = out_shape[0];
                    let total = out_shape[1];
                    let widths: Vec<usize> =
                        parts.iter().map(|&p| nodes[p].value.shape()[1]).collect();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        if needs(p) {
                            let gp = buf!(p);
                            for r in 0..rows {
                                for c in 0..w {
                                    gp[r * w + c] += g[r * total + offset + c];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::AddRow { x, row } => {
                    let (m, n) = (out_shape[0], out_shape[1]);
                    if needs(*x) {
                        for (o, &gv) in buf!(*x).iter_mut().zip(&g) {
                            *o += gv;
                        }
                    }
                    if needs(*row) {
                        let gr = buf!(*row);
                        for r in 0..m {
                            for c in 0..n {
                                gr[c] += g[r * n + c];
                            }
                        }
                    }
                }
                Op::MulRow { x, row } => {
                    let (m, n) = (out_shape[0], out_shape[1]);
                    if needs(*x) {
                        let rv = val(*row);
                        let gx = buf!(*x);
                        for r in 0..m {
                            for c in 0..n {
                                gx[r * n + c] += g[r * n + c] * rv[c];
                            }
                        }
                    }
                    if needs(*row) {
                        let xv = val(*x);
                        let gr = buf!(*row);
                        for r in 0..m {
                            for c in 0..n {
                                gr[c] += g[r * n + c] * xv[r * n + c];
                            }
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    if needs(*x) {
                        let (m, n) = (out_shape[0], out_shape[1]);
                        let y = nodes[i].value.as_slice();
                        let gx = buf!(*x);
                        for r in 0..m {
                            let yr = &y[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..n {
                                gx[r * n + c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                }
                Op::LayerNormRows {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let (m, n) = (out_shape[0], out_shape[1]);
                    let xv = val(*x);
                    let gv = val(*gamma);
                    let nf = n as f64;
                    if needs(*x) {
                        let mut acc = vec![0.0; m * n];
                        for r in 0..m {
                            let (mu, rs) = (mean[r], rstd[r]);
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for c in 0..n {
                                let xh = (xv[r * n + c] - mu) * rs;
                                let gl = g[r * n + c] * gv[c];
                                m1 += gl;
                                m2 += gl * xh;
                            }
                            m1 /= nf;
                            m2 /= nf;
                            for c in 0..n {
                                let xh = (xv[r * n + c] - mu) * rs;
                                let gl = g[r * n + c] * gv[c];
                                acc[r * n + c] = rs * (gl - m1 - xh * m2);
                            }
                        }
                        for (o, a) in buf!(*x).iter_mut().zip(&acc) {
                            *o += a;
                        }
                    }
                    if needs(*gamma) {
                        let gg = buf!(*gamma);
                        for r in 0..m {
                            let (mu, rs) = (mean[r], rstd[r]);
                            for c in 0..n {
                                let xh = (xv[r * n + c] - mu) * rs;
                                gg[c] += g[r * n + c] * xh;
                            }
                        }
                    }
                    if needs(*beta) {
                        let gb = buf!(*beta);
                        for r in 0..m {
                            for c in 0..n {
                                gb[c] += g[r * n + c];
                            }
                        }
                    }
                }
                Op::LayerNormPlain { x, mean, rstd } => {
                    if needs(*x) {
                        let (m, n) = (out_shape[0], out_shape[1]);
                        let xv = val(*x);
                        let nf = n as f64;
                        let mut acc = vec![0.0; m * n];
                        for r in 0..m {
                            let (mu, rs) = (mean[r], rstd[r]);
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for c in 0..n {
                                let xh = (xv[r * n + c] - mu) * rs;
                                m1 += g[r * n + c];
                                m2 += g[r * n + c] * xh;
                            }
                            m1 /= nf;
                            m2 /= nf;
                            for c in 0..n {
                                let xh = (xv[r * n + c] - mu) * rs;
                                acc[r * n + c] = rs * (g[r * n + c] - m1 - xh * m2);
                            }
                        }
                        for (o, a) in buf!(*x).iter_mut().zip(&acc) {
                            *o += a;
                        }
                    }
                }
                Op::Gelu(x) => {
                    if needs(*x) {
                        let xv = val(*x);
                        for ((o, &gv), &x_) in buf!(*x).iter_mut().zip(&g).zip(xv) {
                            *o += gv * gelu_prime(x_);
                        }
                    }
                }
                Op::MeanAll(x) => {
                    if needs(*x) {
                        let share = g[0] / numel(*x) as f64;
                        for o in buf!(*x).iter_mut() {
                            *o += share;
                        }
                    }
                }
                Op::SumAll(x) => {
                    if needs(*x) {
                        let gv = g[0];
                        for o in buf!(*x).iter_mut() {
                            *o += gv;
                        }
                    }
                }
            }
        }

        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    /// Naive triple-loop product used as the independent matmul oracle.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        assert_eq!(k, b.shape()[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.as_slice()[i * k + p] * b.as_slice()[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        t(m, n, &out)
    }

    fn fill_random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::Rng::from_seed(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
        t(rows, cols, &data)
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = Tape::new();
        let x = tape.constant(t(2, 2, &[3.0, -1.0, 0.5, 2.0]));
        let eye = tape.constant(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(x, eye).unwrap();
        assert!(tape.value(y).bitwise_eq(tape.value(x)));
    }

    #[test]
    fn matmul_column_selector_picks_column() {
        let mut tape = Tape::new();
        let x = tape.constant(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let sel = tape.constant(t(3, 1, &[0.0, 1.0, 0.0]));
        let y = tape.matmul(x, sel).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[2.0, 5.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle_exactly() {
        let a = fill_random(3, 4, 1);
        let b = fill_random(4, 2, 2);
        let want = matmul_oracle(&a, &b);
        let mut tape = Tape::new();
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let y = tape.matmul(av, bv).unwrap();
        // Same summation order, so equality is exact.
        assert!(tape.value(y).bitwise_eq(&want));
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(t(2, 3, &[0.0; 6]));
        let b = tape.constant(t(2, 2, &[0.0; 4]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(crate::error::Error::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 2, &[0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_handles_huge_logits_without_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 2, &[1000.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        let out = tape.value(y).as_slice();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1] >= 0.0 && out[1] < 1e-12);
    }

    #[test]
    fn softmax_two_logit_values_match_closed_form() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 2, &[1.0, 2.0]));
        let y = tape.softmax_rows(x).unwrap();
        let out = tape.value(y).as_slice();
        assert!((out[0] - 0.268_941_421_369_995_1).abs() < 1e-9);
        assert!((out[1] - 0.731_058_578_630_004_9).abs() < 1e-9);
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_maps_to_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 3, &[5.0, 5.0, 5.0]));
        let gamma = tape.constant(Tensor::from_vec(vec![3], vec![1.0; 3]).unwrap());
        let beta = tape.constant(Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap());
        let y = tape.layer_norm_rows(x, gamma, beta, 1e-5).unwrap();
        for &v in tape.value(y).as_slice() {
            assert_eq!(v, 0.0);
        }
        // Zero eps hits the constant-row convention branch.
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 3, &[5.0, 5.0, 5.0]));
        let y = tape.layer_norm_plain(x, 0.0).unwrap();
        for &v in tape.value(y).as_slice() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row_is_fixed_point_at_zero_eps() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 2, &[1.0, -1.0]));
        let y = tape.layer_norm_plain(x, 0.0).unwrap();
        let out = tape.value(y).as_slice();
        assert!((out[0] - 1.0).abs() < 1e-15);
        assert!((out[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let x = fill_random(4, 8, 77);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.layer_norm_plain(xv, 1e-5).unwrap();
        let out = tape.value(y).as_slice();
        for r in 0..4 {
            let row = &x.as_slice()[r * 8..(r + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            for c in 0..8 {
                let want = (row[c] - mean) / (var + 1e-5).sqrt();
                assert!((out[r * 8 + c] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gelu_known_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841192).abs() < 1e-5);
        // Asymptotes: identity for large x, zero for very negative x.
        assert!((gelu_scalar(20.0) - 20.0).abs() < 1e-9);
        assert!(gelu_scalar(-20.0).abs() < 1e-9);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 3, &[1.0, 2.0, 3.0]));
        let y = tape.sum_all(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum_all(sq).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn fanout_gradients_accumulate_by_summation() {
        // loss = sum(x) + sum(x) => dloss/dx = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[0.3, -0.7]));
        let s1 = tape.sum_all(x).unwrap();
        let s2 = tape.sum_all(x).unwrap();
        let y = tape.add(s1, s2).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let y = tape.add(x, x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(crate::error::Error::Contract { .. })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let c = tape.constant(t(1, 2, &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let y = tape.sum_all(p).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn transpose_and_slice_round_trip_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let xt = tape.transpose(x).unwrap();
        assert_eq!(tape.value(xt).as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let s = tape.slice_cols(x, 1, 2).unwrap();
        assert_eq!(tape.value(s).as_slice(), &[2.0, 3.0, 5.0, 6.0]);
        let parts = [tape.slice_cols(x, 0, 1).unwrap(), s];
        let back = tape.concat_cols(&parts).unwrap();
        assert!(tape.value(back).bitwise_eq(tape.value(x)));
    }

    #[test]
    fn forward_ops_produce_finite_outputs_on_finite_inputs() {
        let x = fill_random(3, 6, 5);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let ops: Vec<Var> = vec![
            tape.softmax_rows(xv).unwrap(),
            tape.layer_norm_plain(xv, 1e-5).unwrap(),
            tape.gelu(xv).unwrap(),
            tape.affine(xv, 3.0, -1.0).unwrap(),
        ];
        for v in ops {
            assert!(tape.value(v).as_slice().iter().all(|x| x.is_finite()));
        }
    }
}
