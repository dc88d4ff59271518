//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The op set is exactly what the MIL heads need: dense matmul, a few
//! element-wise nonlinearities, row softmax, dropout, gather/select, and
//! two fused loss primitives. Values are recorded during the forward pass
//! and replayed in reverse for gradients.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Relu(Var),
    ElemMul(Var, Var),
    Add(Var, Var),
    /// x (K x d) + bias (1 x d), bias broadcast over rows.
    AddRowBroadcast(Var, Var),
    Transpose(Var),
    /// Concatenate 1x1 scalars into a 1xN row.
    ConcatScalars(Vec<Var>),
    /// Mask already contains the 1/(1-p) survivor scaling.
    Dropout(Var, Matrix),
    Scale(Var, f64),
    Sum(Var),
    RowSelect(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// Cross entropy of a 1xM logit row against a class id; softmax
    /// probabilities are cached at record time for the backward pass.
    CrossEntropyLogits(Var, usize, Matrix),
    /// Element-wise smooth hinge (margin 1, quadratic zone on (0,1)).
    SmoothHinge(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients per tape node, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zero matrix if the node is unused.
    pub fn get(&self, v: Var, shape: (usize, usize)) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(shape.0, shape.1),
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numerically stable logistic function, safe for |x| up to ~1e3 and beyond.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth hinge (margin 1): 0.5 - s for s <= 0, (1-s)^2/2 on (0,1), 0 for s >= 1.
pub fn smooth_hinge(s: f64) -> f64 {
    if s <= 0.0 {
        0.5 - s
    } else if s < 1.0 {
        0.5 * (1.0 - s) * (1.0 - s)
    } else {
        0.0
    }
}

fn smooth_hinge_deriv(s: f64) -> f64 {
    if s <= 0.0 {
        -1.0
    } else if s < 1.0 {
        s - 1.0
    } else {
        0.0
    }
}

fn softmax_rows_value(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..x.cols {
            let e = (row[c] - m).exp();
            out.data[r * x.cols + c] = e;
            denom += e;
        }
        for c in 0..x.cols {
            out.data[r * x.cols + c] /= denom;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn tanh_elem(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn sigm_elem(&mut self, x: Var) -> Var {
        let value = self.value(x).map(stable_sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows_value(self.value(x));
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn elem_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::ElemMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `x` is K x d, `bias` is 1 x d, added to every row.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows != 1 || bv.cols != xv.cols {
            return Err(Error::shape("add_row_broadcast", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        for r in 0..value.rows {
            for c in 0..value.cols {
                value.data[r * value.cols + c] += bv.data[c];
            }
        }
        Ok(self.push(value, Op::AddRowBroadcast(x, bias)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    pub fn concat_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if !v.is_scalar() {
                return Err(Error::Contract(
                    "concat_scalars expects 1x1 operands".into(),
                ));
            }
            data.push(v.data[0]);
        }
        let value = Matrix::from_vec(1, parts.len(), data);
        Ok(self.push(value, Op::ConcatScalars(parts.to_vec())))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// 1/(1-p). Eval mode is the exact identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!(
                "dropout probability must be in [0,1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            let value = self.value(x).clone();
            let mask = Matrix::filled(value.rows, value.cols, 1.0);
            return Ok(self.push(value, Op::Dropout(x, mask)));
        }
        let xv = self.value(x).clone();
        let keep = 1.0 / (1.0 - p);
        let mask = Matrix {
            rows: xv.rows,
            cols: xv.cols,
            data: (0..xv.data.len())
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect(),
        };
        let value = xv.zip_map(&mask, |a, m| a * m)?;
        Ok(self.push(value, Op::Dropout(x, mask)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        self.push(value, Op::Scale(x, s))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn row_select(&mut self, x: Var, r: usize) -> Result<Var> {
        let xv = self.value(x);
        if r >= xv.rows {
            return Err(Error::Bounds(format!(
                "row {r} out of {} rows",
                xv.rows
            )));
        }
        let value = Matrix::from_vec(1, xv.cols, xv.row(r).to_vec());
        Ok(self.push(value, Op::RowSelect(x, r)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * xv.cols);
        for &r in idx {
            if r >= xv.rows {
                return Err(Error::Bounds(format!("row {r} out of {} rows", xv.rows)));
            }
            data.extend_from_slice(xv.row(r));
        }
        let value = Matrix::from_vec(idx.len(), xv.cols, data);
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec())))
    }

    /// -log softmax(logits)[label] for a 1xM logit row.
    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows != 1 {
            return Err(Error::Contract("cross_entropy expects a 1xM logit row".into()));
        }
        if label >= lv.cols {
            return Err(Error::Contract(format!(
                "label {label} out of {} classes",
                lv.cols
            )));
        }
        let probs = softmax_rows_value(lv);
        // log-sum-exp form for the loss itself.
        let m = lv.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lv.data.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        let loss = lse - lv.data[label];
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropyLogits(logits, label, probs),
        ))
    }

    pub fn smooth_hinge_elem(&mut self, x: Var) -> Var {
        let value = self.value(x).map(smooth_hinge);
        self.push(value, Op::SmoothHinge(x))
    }

    /// Reverse sweep from a scalar loss node. Every recorded node is visited
    /// exactly once in reverse topological (recording) order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss node, got {}x{}",
                lv.rows, lv.cols
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                // leaf: keep the accumulated gradient for the caller
                Op::Input => grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    let gb = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Tanh(x) => {
                    let gx = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y))?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dot: f64 = (0..y.cols)
                            .map(|c| g.at(r, c) * y.at(r, c))
                            .sum();
                        for c in 0..y.cols {
                            gx.data[r * y.cols + c] = y.at(r, c) * (g.at(r, c) - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), |gi, xi| {
                        if xi > 0.0 {
                            gi
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::ElemMul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |gi, bi| gi * bi)?;
                    let gb = g.zip_map(self.value(*a), |gi, ai| gi * ai)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRowBroadcast(x, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.data[c] += g.at(r, c);
                        }
                    }
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, *x, g.transpose());
                }
                Op::ConcatScalars(parts) => {
                    for (c, &p) in parts.iter().enumerate() {
                        accumulate(&mut grads, p, Matrix::scalar(g.data[c]));
                    }
                }
                Op::Dropout(x, mask) => {
                    let gx = g.zip_map(mask, |gi, m| gi * m)?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, *x, g.scale(*s));
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, Matrix::filled(xv.rows, xv.cols, g.data[0]));
                }
                Op::RowSelect(x, r) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for c in 0..xv.cols {
                        gx.data[r * xv.cols + c] = g.data[c];
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherRows(x, idx) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for (gi, &r) in idx.iter().enumerate() {
                        for c in 0..xv.cols {
                            gx.data[r * xv.cols + c] += g.at(gi, c);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropyLogits(x, label, probs) => {
                    let s = g.data[0];
                    let mut gx = probs.scale(s);
                    gx.data[*label] -= s;
                    accumulate(&mut grads, *x, gx);
                }
                Op::SmoothHinge(x) => {
                    let gx = g.zip_map(self.value(*x), |gi, si| gi * smooth_hinge_deriv(si))?;
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Central finite differences of `f` w.r.t. every entry of every matrix in
/// `params`. The independent check used by the gradient suite.
pub fn finite_diff_grads<F>(f: F, params: &[Matrix], h: f64) -> Vec<Matrix>
where
    F: Fn(&[Matrix]) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    let mut work: Vec<Matrix> = params.to_vec();
    for pi in 0..params.len() {
        let mut g = Matrix::zeros(params[pi].rows, params[pi].cols);
        for e in 0..params[pi].data.len() {
            let orig = work[pi].data[e];
            work[pi].data[e] = orig + h;
            let fp = f(&work);
            work[pi].data[e] = orig - h;
            let fm = f(&work);
            work[pi].data[e] = orig;
            g.data[e] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Relative error between analytic and finite-difference gradients, using
/// max(1, |fd|) scaling so near-zero entries compare absolutely.
pub fn grad_rel_err(analytic: &Matrix, fd: &Matrix) -> f64 {
    analytic
        .data
        .iter()
        .zip(&fd.data)
        .map(|(&a, &b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}
