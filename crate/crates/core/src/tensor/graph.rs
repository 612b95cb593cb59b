//! Define-by-run reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape: every op appends a node whose value is computed
//! eagerly, and [`Graph::backward`] walks the tape in reverse. Graphs are
//! rebuilt for every training step.

use super::mat::Mat;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Entrywise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
    Gelu,
    /// `max(x, 0) + log1p(exp(−|x|))`
    Softplus,
    Exp,
    Log1p,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Gelu => gelu(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log1p => x.ln_1p(),
        }
    }

    /// Derivative given the input `x` and the forward output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log1p => 1.0 / (1.0 + x),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Unary(Var, Unary),
    Map(Var, fn(f64) -> f64),
    SoftmaxRows(Var),
    NormalizeRows(Var, Vec<f64>),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    SumSq(Var),
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Mat>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Mat>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Drops every node created after the first `len`, so a prefix of
    /// constants can be reused across independent forward passes.
    pub fn truncate(&mut self, len: usize) {
        self.values.truncate(len);
        self.ops.truncate(len);
        self.requires_grad.truncate(len);
        self.grads.truncate(len);
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of `v`; zeros when `v` took no part in a backward pass.
    pub fn grad(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.values[v.0].shape();
                Mat::zeros(r, c)
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Entrywise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (ra, ca) = self.value(a).shape();
        let (rr, cr) = self.value(row).shape();
        if rr != 1 || cr != ca {
            return Err(Error::shape(op, format!("{ra}x{ca} with row {rr}x{cr}")));
        }
        Ok(())
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let mut value = self.value(a).clone();
        let r = self.value(row).row(0).to_vec();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` entrywise by a 1×n row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let mut value = self.value(a).clone();
        let r = self.value(row).row(0).to_vec();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let value = self.value(a).map(|x| f.apply(x));
        let rg = self.rg(a);
        self.push(value, Op::Unary(a, f), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    /// Entrywise `f` with a caller-supplied derivative `df` (evaluated at the input).
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Map(a, df), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)` with biased variance.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("normalization eps must be positive".into()));
        }
        let src = self.value(a);
        let n = src.cols() as f64;
        let mut value = src.clone();
        let mut inv_std = Vec::with_capacity(src.rows());
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::NormalizeRows(a, inv_std), rg))
    }

    /// Row-wise layer normalization followed by a per-column affine map.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.normalize_rows(a, eps)?;
        let scaled = self.mul_row(n, gain)?;
        self.add_row(scaled, bias)
    }

    /// `x · wᵀ + bias` with `w` stored as out×in and `bias` as a 1×out row.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        if start + len > src.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {} columns", start + len, src.cols()),
            ));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let value = src.select_cols(&idx);
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Mat::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::stack_rows(&mats)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {}", src.rows()),
            ));
        }
        let value = src.select_rows(idx);
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Column means as a 1×n row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Squared Frobenius norm.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).frobenius_sq());
        let rg = self.rg(a);
        self.push(value, Op::SumSq(a), rg)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::Contract("weighted_sum of no terms".into()))
    }

    /// Reverse sweep from a 1×1 node. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Mat::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Mat, adj: &mut [Option<Mat>]) -> Result<()> {
        let send = |v: Var, contrib: Mat, adj: &mut [Option<Mat>]| {
            if !self.requires_grad[v.0] {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        };
        let y = &self.values[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul_nt(self.value(*b))?, adj);
                }
                if self.rg(*b) {
                    send(*b, self.value(*a).matmul_tn(g)?, adj);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul(self.value(*b))?, adj);
                }
                if self.rg(*b) {
                    send(*b, g.matmul_tn(self.value(*a))?, adj);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), adj);
                send(*b, g.clone(), adj);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), adj);
                send(*b, g.scale(-1.0), adj);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y)?, adj);
                }
                if self.rg(*b) {
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y)?, adj);
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s), adj),
            Op::AddRow(a, row) => {
                send(*a, g.clone(), adj);
                if self.rg(*row) {
                    send(*row, column_sums(g), adj);
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for k in 0..ga.rows() {
                        for (v, w) in ga.row_mut(k).iter_mut().zip(r.row(0)) {
                            *v *= w;
                        }
                    }
                    send(*a, ga, adj);
                }
                if self.rg(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y)?;
                    send(*row, column_sums(&prod), adj);
                }
            }
            Op::Unary(a, f) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for ((gv, &xv), &yv) in ga.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *gv *= f.derivative(xv, yv);
                }
                send(*a, ga, adj);
            }
            Op::Map(a, df) => {
                let ga = g.zip_map(self.value(*a), |gv, xv| gv * df(xv))?;
                send(*a, ga, adj);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g.clone();
                for k in 0..ga.rows() {
                    let yr = y.row(k);
                    let inner: f64 = ga.row(k).iter().zip(yr).map(|(u, v)| u * v).sum();
                    for (gv, &yv) in ga.row_mut(k).iter_mut().zip(yr) {
                        *gv = yv * (*gv - inner);
                    }
                }
                send(*a, ga, adj);
            }
            Op::NormalizeRows(a, inv_std) => {
                let n = y.cols() as f64;
                let mut ga = g.clone();
                for k in 0..ga.rows() {
                    let yr = y.row(k);
                    let gr = ga.row(k);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(u, v)| u * v).sum::<f64>() / n;
                    let s = inv_std[k];
                    for (gv, &yv) in ga.row_mut(k).iter_mut().zip(yr) {
                        *gv = s * (*gv - mean_g - yv * mean_gy);
                    }
                }
                send(*a, ga, adj);
            }
            Op::Transpose(a) => send(*a, g.transpose(), adj),
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for k in 0..r {
                    ga.row_mut(k)[*start..*start + g.cols()].copy_from_slice(g.row(k));
                }
                send(*a, ga, adj);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let idx: Vec<usize> = (offset..offset + w).collect();
                        send(p, g.select_cols(&idx), adj);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.rg(p) {
                        let idx: Vec<usize> = (offset..offset + h).collect();
                        send(p, g.select_rows(&idx), adj);
                    }
                    offset += h;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                send(*a, ga, adj);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Mat::zeros(r, c);
                let inv = 1.0 / r as f64;
                for k in 0..r {
                    for (o, v) in ga.row_mut(k).iter_mut().zip(g.row(0)) {
                        *o = v * inv;
                    }
                }
                send(*a, ga, adj);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, Mat::filled(r, c, g.item()), adj);
            }
            Op::SumSq(a) => send(*a, self.value(*a).scale(2.0 * g.item()), adj),
        }
        Ok(())
    }
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for k in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(k)) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(Unary::Tanh.apply(0.0), 0.0);
    }

    #[test]
    fn softmax_rows_basic() {
        let mut g = Graph::new();
        let a = g.constant(Mat::from_rows(&[[0.0, 0.0], [1e9, 0.0]]));
        let s = g.softmax_rows(a);
        assert_eq!(g.value(s).row(0), &[0.5, 0.5]);
        assert_eq!(g.value(s).row(1), &[1.0, 0.0]);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let gain = g.constant(Mat::filled(1, 3, 1.0));
        let bias = g.constant(Mat::zeros(1, 3));
        let a = g.constant(Mat::filled(1, 3, 4.2));
        let y = g.layer_norm(a, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let gain = g.constant(Mat::filled(1, 2, 1.0));
        let bias = g.constant(Mat::zeros(1, 2));
        let a = g.constant(Mat::from_rows(&[[1.0, -1.0]]));
        let y = g.layer_norm(a, gain, bias, 1e-14).unwrap();
        assert!((g.value(y).get(0, 0) - 1.0).abs() < 1e-12);
        assert!((g.value(y).get(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_simple_rules() {
        let mut g = Graph::new();
        let m = g.param(Mat::from_rows(&[[1.0, -2.0], [3.0, 0.5]]));
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(m), Mat::filled(2, 2, 1.0));

        let mut g = Graph::new();
        let m = g.param(Mat::from_rows(&[[1.0, -2.0], [3.0, 0.5]]));
        let s = g.sum_sq(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(m), g.value(m).scale(2.0));
    }

    #[test]
    fn fan_out_sums_contributions() {
        let mut g = Graph::new();
        let x = g.param(Mat::scalar(3.0));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 2.0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Mat::scalar(3.0));
        let t = g.tanh(x);
        let y = g.sum_sq(t);
        g.backward(y).unwrap();
        let once = g.grad(x).item();
        g.backward(y).unwrap();
        assert!((g.grad(x).item() - 2.0 * once).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Mat::zeros(2, 1));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(Mat::from_rows(&[[2.0]]));
        let x = g.param(Mat::from_rows(&[[1.5]]));
        let y = g.matmul(x, w).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).item(), 0.0);
        assert_eq!(g.grad(x).item(), 2.0);
    }
}
