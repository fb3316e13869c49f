//! Tape-based reverse-mode differentiation over dense 2-D values.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products into per-node gradient buffers.
//! Nodes that do not depend on a differentiable leaf are skipped.

use std::rc::Rc;

use super::kernels::{self, sigmoid};
use super::Tensor;
use crate::error::{ensure, Error, Result};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    RmsNorm { x: Var, gain: Var, inv: Vec<f64> },
    Softmax { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Broadcast { src: Var, index: usize },
    LaplaceBias { alpha: Var, mu: Var, dist: Rc<Tensor> },
    Sum(Var),
    SquaredError { pred: Var, target: Rc<Tensor>, scale: f64 },
    FocalSoft { pred: Var, target: Rc<Tensor>, gamma: f64, balance: f64, scale: f64 },
    Bce { pred: Var, target: Rc<Tensor>, scale: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded computation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.last_dim())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose differentiability follows the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let ng = value.requires_grad();
        self.push(value, Op::Leaf, ng)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a));
        let (k2, n) = shape2(self.value(b));
        ensure!(k == k2, Shape, "matmul [{m},{k}] x [{k2},{n}]");
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a));
        let (n, k2) = shape2(self.value(b));
        ensure!(k == k2, Shape, "matmul_bt [{m},{k}] x [{n},{k2}]^T");
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulBT(a, b), ng))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(a));
        ensure!(self.value(bias).len() == n, Shape, "row bias of length {} for width {n}", self.value(bias).len());
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(a, bias), ng))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(ta.shape() == tb.shape(), Shape, "elementwise {:?} vs {:?}", ta.shape(), tb.shape());
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::silu, Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Hard clamp; the gradient is zero wherever the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        ensure!(self.value(gain).len() == n, Shape, "rmsnorm gain length {} for width {n}", self.value(gain).len());
        let mut out = vec![0.0; m * n];
        let inv = kernels::rmsnorm_rows(self.value(x).data(), self.value(gain).data(), eps, &mut out);
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(Tensor::from_parts(self.value(x).shape().to_vec(), out), Op::RmsNorm { x, gain, inv }, ng))
    }

    /// Softmax over the last dimension. `-inf` entries receive zero weight;
    /// a row with no finite entry yields zeros.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        ensure!(!tx.has_nan(), Numerical, "NaN entering softmax");
        let d = tx.last_dim();
        let mut out = vec![0.0; tx.len()];
        kernels::softmax_rows(tx.data(), d, None, &mut out);
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let ng = self.ng(x);
        Ok(self.push(value, Op::Softmax { x }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        ensure!(start + width <= n, Shape, "column slice {start}+{width} of width {n}");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * width);
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![m, width], out), Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Shape, "concat of zero parts");
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = shape2(self.value(p));
            ensure!(pm == m, Shape, "concat rows {pm} vs {m}");
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Column `[rows, 1]` filled with element `index` of `src`.
    pub fn broadcast(&mut self, src: Var, index: usize, rows: usize) -> Result<Var> {
        ensure!(index < self.value(src).len(), Shape, "broadcast index {index} of {}", self.value(src).len());
        let v = self.value(src).data()[index];
        let ng = self.ng(src);
        Ok(self.push(Tensor::from_parts(vec![rows, 1], vec![v; rows]), Op::Broadcast { src, index }, ng))
    }

    /// Query-conditioned Laplacian bias: `B[i][j] = -alpha[i] * |dist[i][j] - mu[i]|`.
    pub fn laplace_bias(&mut self, alpha: Var, mu: Var, dist: Rc<Tensor>) -> Result<Var> {
        let (s, s2) = shape2(&dist);
        ensure!(s == s2, Shape, "distance matrix must be square, got [{s},{s2}]");
        ensure!(
            self.value(alpha).len() == s && self.value(mu).len() == s,
            Shape,
            "per-query alpha/mu must have {s} entries"
        );
        let out = super::laplace_bias_values(self.value(alpha).data(), self.value(mu).data(), &dist);
        let ng = self.ng(alpha) || self.ng(mu);
        Ok(self.push(out, Op::LaplaceBias { alpha, mu, dist }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `scale * Σ (pred - target)²`
    pub fn squared_error(&mut self, pred: Var, target: Rc<Tensor>, scale: f64) -> Result<Var> {
        self.check_target(pred, &target)?;
        let s: f64 = self.value(pred).data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(scale * s), Op::SquaredError { pred, target, scale }, ng))
    }

    /// `scale * Σ focal(pred, target)` with soft targets.
    pub fn focal_soft(&mut self, pred: Var, target: Rc<Tensor>, gamma: f64, balance: f64, scale: f64) -> Result<Var> {
        self.check_target(pred, &target)?;
        let s: f64 =
            self.value(pred).data().iter().zip(target.data()).map(|(&p, &y)| focal_term(p, y, gamma, balance)).sum();
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(scale * s), Op::FocalSoft { pred, target, gamma, balance, scale }, ng))
    }

    /// `scale * Σ bce(pred, target)`
    pub fn bce(&mut self, pred: Var, target: Rc<Tensor>, scale: f64) -> Result<Var> {
        self.check_target(pred, &target)?;
        let s: f64 = self.value(pred).data().iter().zip(target.data()).map(|(&p, &y)| bce_term(p, y)).sum();
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(scale * s), Op::Bce { pred, target, scale }, ng))
    }

    fn check_target(&self, pred: Var, target: &Tensor) -> Result<()> {
        ensure!(
            self.value(pred).len() == target.len(),
            Shape,
            "prediction has {} entries, target {}",
            self.value(pred).len(),
            target.len()
        );
        Ok(())
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        ensure!(self.value(root).len() == 1, Shape, "backward root must be scalar, got {:?}", self.shape(root));
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| x.is_nan()) {
                    return Err(Error::Numerical(format!("NaN gradient at tape node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = shape2(self.value(*a));
                let n = self.value(*b).last_dim();
                if let Some(ga) = self.slot(*a, grads) {
                    kernels::matmul_bt_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    kernels::matmul_at_acc(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulBT(a, b) => {
                let (m, k) = shape2(self.value(*a));
                let n = self.value(*b).rows();
                if let Some(ga) = self.slot(*a, grads) {
                    kernels::matmul_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    kernels::matmul_at_acc(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(*bias, grads) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    axpy(gb, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    let bv = self.value(*b).data();
                    ga.iter_mut().zip(g).zip(bv).for_each(|((o, &gi), &x)| *o += gi * x);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    let av = self.value(*a).data();
                    gb.iter_mut().zip(g).zip(av).for_each(|((o, &gi), &x)| *o += gi * x);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, g, *c);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().zip(g).zip(y).for_each(|((o, &gi), &t)| *o += gi * (1.0 - t * t));
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().zip(g).zip(y).for_each(|((o, &gi), &s)| *o += gi * s * (1.0 - s));
                }
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().zip(g).zip(x).for_each(|((o, &gi), &xv)| {
                        let s = sigmoid(xv);
                        *o += gi * (s + xv * s * (1.0 - s));
                    });
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().zip(g).zip(y).for_each(|((o, &gi), &e)| *o += gi * e);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().zip(g).zip(xv).for_each(|((o, &gi), &v)| {
                        if v >= *lo && v <= *hi {
                            *o += gi;
                        }
                    });
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                if let Some(gx) = self.slot(*x, grads) {
                    for (r, ((gxr, gr), xr)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xv.chunks(d)).enumerate() {
                        let iv = inv[r];
                        let proj: f64 = gr.iter().zip(gv).zip(xr).map(|((a, b), c)| a * b * c).sum();
                        let coef = iv * iv * iv * proj / d as f64;
                        for j in 0..d {
                            gxr[j] += iv * gv[j] * gr[j] - coef * xr[j];
                        }
                    }
                }
                if let Some(gg) = self.slot(*gain, grads) {
                    for (r, (gr, xr)) in g.chunks(d).zip(xv.chunks(d)).enumerate() {
                        let iv = inv[r];
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j] * iv;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let d = node.value.last_dim();
                if let Some(gx) = self.slot(*x, grads) {
                    for ((gxr, gr), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dotp = kernels::dot(gr, yr);
                        for j in 0..d {
                            gxr[j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).last_dim();
                let w = node.value.last_dim();
                if let Some(gx) = self.slot(*x, grads) {
                    for (gxr, gr) in gx.chunks_mut(n).zip(g.chunks(w)) {
                        axpy(&mut gxr[*start..start + w], gr, 1.0);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.last_dim();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(gp) = self.slot(p, grads) {
                        for (gpr, gr) in gp.chunks_mut(w).zip(g.chunks(n)) {
                            axpy(gpr, &gr[off..off + w], 1.0);
                        }
                    }
                    off += w;
                }
            }
            Op::Broadcast { src, index } => {
                if let Some(gs) = self.slot(*src, grads) {
                    gs[*index] += g.iter().sum::<f64>();
                }
            }
            Op::LaplaceBias { alpha, mu, dist } => {
                let s = dist.last_dim();
                let av = self.value(*alpha).data();
                let mv = self.value(*mu).data();
                let dv = dist.data();
                let mut da = vec![0.0; s];
                let mut dm = vec![0.0; s];
                for i in 0..s {
                    let (gr, dr) = (&g[i * s..(i + 1) * s], &dv[i * s..(i + 1) * s]);
                    for j in 0..s {
                        let diff = dr[j] - mv[i];
                        da[i] -= gr[j] * diff.abs();
                        dm[i] += gr[j] * av[i] * sign(diff);
                    }
                }
                if let Some(ga) = self.slot(*alpha, grads) {
                    axpy(ga, &da, 1.0);
                }
                if let Some(gm) = self.slot(*mu, grads) {
                    axpy(gm, &dm, 1.0);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::SquaredError { pred, target, scale } => {
                let pv = self.value(*pred).data();
                let c = 2.0 * scale * g[0];
                if let Some(gp) = self.slot(*pred, grads) {
                    for ((o, &p), &t) in gp.iter_mut().zip(pv).zip(target.data()) {
                        *o += c * (p - t);
                    }
                }
            }
            Op::FocalSoft { pred, target, gamma, balance, scale } => {
                let pv = self.value(*pred).data();
                let c = scale * g[0];
                if let Some(gp) = self.slot(*pred, grads) {
                    for ((o, &p), &t) in gp.iter_mut().zip(pv).zip(target.data()) {
                        *o += c * focal_grad(p, t, *gamma, *balance);
                    }
                }
            }
            Op::Bce { pred, target, scale } => {
                let pv = self.value(*pred).data();
                let c = scale * g[0];
                if let Some(gp) = self.slot(*pred, grads) {
                    for ((o, &p), &t) in gp.iter_mut().zip(pv).zip(target.data()) {
                        *o += c * bce_grad(p, t);
                    }
                }
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }
}

#[inline]
fn axpy(out: &mut [f64], x: &[f64], c: f64) {
    out.iter_mut().zip(x).for_each(|(o, &v)| *o += c * v);
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

#[inline]
fn in_prob_range(p: f64) -> bool {
    (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p)
}

/// Per-entry soft-target focal loss.
pub fn focal_term(p: f64, y: f64, gamma: f64, balance: f64) -> f64 {
    let p = clamp_prob(p);
    -(balance * (1.0 - p).powf(gamma) * y * p.ln() + (1.0 - balance) * p.powf(gamma) * (1.0 - y) * (1.0 - p).ln())
}

fn focal_grad(p: f64, y: f64, gamma: f64, balance: f64) -> f64 {
    if !in_prob_range(p) {
        return 0.0;
    }
    let q = 1.0 - p;
    let (dpos, dneg) = if gamma == 0.0 {
        (1.0 / p, -1.0 / q)
    } else {
        (
            -gamma * q.powf(gamma - 1.0) * p.ln() + q.powf(gamma) / p,
            gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q,
        )
    };
    -(balance * y * dpos + (1.0 - balance) * (1.0 - y) * dneg)
}

/// Per-entry binary cross-entropy.
pub fn bce_term(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn bce_grad(p: f64, y: f64) -> f64 {
    if !in_prob_range(p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}
