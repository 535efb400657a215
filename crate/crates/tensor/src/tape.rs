//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use crate::error::{Result, TensorError};
use crate::matrix::{matmul_a_bt_acc, matmul_at_b_acc, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GroupDot { candidates: Var, queries: Var, group: usize },
    SoftmaxXentFirst(Var),
    BceWithLogits(Var, Vec<f64>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when the loss
    /// does not depend on it.
    pub fn wrt(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Matrix {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(what: &str, a: &Matrix, b: &Matrix) -> TensorError {
    TensorError::Shape(format!(
        "{what}: {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    ))
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

    /// Differentiable input (a parameter).
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, frozen noise).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.needs(&[a]);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Adds a 1×m row to every row of an n×m matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", av, rv));
        }
        let mut out = av.clone();
        let bias = rv.as_slice().to_vec();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let ng = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.needs(&[a]);
        self.push(out, Op::Offset(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.needs(&[a]);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.needs(&[a]);
        self.push(out, Op::Square(a), ng)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix::scalar(v.sum() / v.len().max(1) as f64);
        let ng = self.needs(&[a]);
        self.push(out, Op::Mean(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("concat of zero parts".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let orow = out.row_mut(r);
            let mut at = 0;
            for p in parts {
                let src = self.nodes[p.0].value.row(r);
                orow[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if start > end || end > v.cols() {
            return Err(TensorError::Shape(format!(
                "column slice {start}..{end} of a {}-column matrix",
                v.cols()
            )));
        }
        let mut out = Matrix::zeros(v.rows(), end - start);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..end]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    /// For `queries` (B×d) and `candidates` ((B·group)×d), returns the B×group
    /// matrix of dot products between each query and its own candidate rows.
    pub fn group_dot(&mut self, candidates: Var, queries: Var, group: usize) -> Result<Var> {
        let (c, q) = (self.value(candidates), self.value(queries));
        if group == 0 || c.cols() != q.cols() || c.rows() != q.rows() * group {
            return Err(shape_err("group_dot", c, q));
        }
        let mut out = Matrix::zeros(q.rows(), group);
        for b in 0..q.rows() {
            let qrow = q.row(b);
            for j in 0..group {
                let crow = c.row(b * group + j);
                out.set(b, j, crow.iter().zip(qrow).map(|(x, y)| x * y).sum());
            }
        }
        let ng = self.needs(&[candidates, queries]);
        Ok(self.push(
            out,
            Op::GroupDot {
                candidates,
                queries,
                group,
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy over rows, the true class being column 0.
    pub fn softmax_xent_first(&mut self, logits: Var) -> Result<Var> {
        let l = self.value(logits);
        if l.rows() == 0 || l.cols() == 0 {
            return Err(TensorError::Shape("softmax cross-entropy on empty logits".into()));
        }
        let mut total = 0.0;
        for r in 0..l.rows() {
            let row = l.row(r);
            total += log_sum_exp(row) - row[0];
        }
        let out = Matrix::scalar(total / l.rows() as f64);
        let ng = self.needs(&[logits]);
        Ok(self.push(out, Op::SoftmaxXentFirst(logits), ng))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`
    /// (one logit per entry).
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let l = self.value(logits);
        if l.len() != labels.len() || l.is_empty() {
            return Err(TensorError::Shape(format!(
                "bce: {} logits vs {} labels",
                l.len(),
                labels.len()
            )));
        }
        let total: f64 = l
            .as_slice()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| bce_logit(x, y))
            .sum();
        let out = Matrix::scalar(total / labels.len() as f64);
        let ng = self.needs(&[logits]);
        Ok(self.push(out, Op::BceWithLogits(logits, labels.to_vec()), ng))
    }

    /// Reverse sweep from a 1×1 loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(TensorError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], var: Var, f: impl FnOnce(&mut Matrix)) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        let slot = &mut grads[var.0];
        if slot.is_none() {
            let (r, c) = self.nodes[var.0].value.shape();
            *slot = Some(Matrix::zeros(r, c));
        }
        f(slot.as_mut().expect("initialised above"));
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Matrix>],
        var: Var,
        g: &Matrix,
        f: impl Fn(usize, f64) -> f64,
    ) {
        self.accumulate(grads, var, |acc| {
            for (i, (a, &gv)) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                *a += f(i, gv);
            }
        });
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |acc| matmul_a_bt_acc(g, bv, acc));
                self.accumulate(grads, *b, |acc| matmul_at_b_acc(av, g, acc));
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                self.accumulate(grads, *a, |acc| acc.add_assign(&gt));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |acc| acc.add_assign(g));
                self.accumulate(grads, *row, |acc| {
                    let accs = acc.as_mut_slice();
                    for r in 0..g.rows() {
                        for (o, v) in accs.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| acc.add_assign(g));
                self.accumulate(grads, *b, |acc| acc.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| acc.add_assign(g));
                self.elementwise(grads, *b, g, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).as_slice(), self.value(*b).as_slice());
                self.elementwise(grads, *a, g, |i, gv| gv * bv[i]);
                self.elementwise(grads, *b, g, |i, gv| gv * av[i]);
            }
            Op::Scale(a, s) => self.elementwise(grads, *a, g, |_, gv| gv * s),
            Op::Offset(a) => self.accumulate(grads, *a, |acc| acc.add_assign(g)),
            Op::Relu(a) => {
                let x = self.value(*a).as_slice();
                self.elementwise(grads, *a, g, |i, gv| if x[i] > 0.0 { gv } else { 0.0 });
            }
            Op::Tanh(a) => {
                let y = out.as_slice();
                self.elementwise(grads, *a, g, |i, gv| gv * (1.0 - y[i] * y[i]));
            }
            Op::Sigmoid(a) => {
                let y = out.as_slice();
                self.elementwise(grads, *a, g, |i, gv| gv * y[i] * (1.0 - y[i]));
            }
            Op::Exp(a) => {
                let y = out.as_slice();
                self.elementwise(grads, *a, g, |i, gv| gv * y[i]);
            }
            Op::Square(a) => {
                let x = self.value(*a).as_slice();
                self.elementwise(grads, *a, g, |i, gv| 2.0 * x[i] * gv);
            }
            Op::Sum(a) => {
                let gv = g.as_slice()[0];
                self.accumulate(grads, *a, |acc| {
                    acc.as_mut_slice().iter_mut().for_each(|v| *v += gv)
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                let gv = g.as_slice()[0] / n;
                self.accumulate(grads, *a, |acc| {
                    acc.as_mut_slice().iter_mut().for_each(|v| *v += gv)
                });
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.accumulate(grads, *p, |acc| {
                        for r in 0..g.rows() {
                            for (o, v) in acc.row_mut(r).iter_mut().zip(&g.row(r)[at..at + w]) {
                                *o += v;
                            }
                        }
                    });
                    at += w;
                }
            }
            Op::SliceCols(a, start) => {
                let start = *start;
                self.accumulate(grads, *a, |acc| {
                    for r in 0..g.rows() {
                        let dst = &mut acc.row_mut(r)[start..start + g.cols()];
                        for (o, v) in dst.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::GroupDot {
                candidates,
                queries,
                group,
            } => {
                let group = *group;
                let (cv, qv) = (self.value(*candidates), self.value(*queries));
                self.accumulate(grads, *candidates, |acc| {
                    for b in 0..qv.rows() {
                        for j in 0..group {
                            let gv = g.get(b, j);
                            for (o, q) in acc.row_mut(b * group + j).iter_mut().zip(qv.row(b)) {
                                *o += gv * q;
                            }
                        }
                    }
                });
                self.accumulate(grads, *queries, |acc| {
                    for b in 0..qv.rows() {
                        for j in 0..group {
                            let gv = g.get(b, j);
                            let crow = cv.row(b * group + j);
                            for (o, c) in acc.row_mut(b).iter_mut().zip(crow) {
                                *o += gv * c;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxXentFirst(logits) => {
                let l = self.value(*logits);
                let scale = g.as_slice()[0] / l.rows() as f64;
                self.accumulate(grads, *logits, |acc| {
                    for r in 0..l.rows() {
                        let row = l.row(r);
                        let lse = log_sum_exp(row);
                        for (c, o) in acc.row_mut(r).iter_mut().enumerate() {
                            let p = (row[c] - lse).exp();
                            let target = if c == 0 { 1.0 } else { 0.0 };
                            *o += scale * (p - target);
                        }
                    }
                });
            }
            Op::BceWithLogits(logits, labels) => {
                let l = self.value(*logits).as_slice();
                let scale = g.as_slice()[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |acc| {
                    for ((o, &x), &y) in acc.as_mut_slice().iter_mut().zip(l).zip(labels) {
                        *o += scale * (sigmoid(x) - y);
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln Σ exp(xᵢ)` without overflow; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Binary cross-entropy of `sigmoid(x)` against label `y`, stable for large |x|.
pub fn bce_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut t = Tape::new();
        let w = t.param(Matrix::row_vector(&[0.3, -1.0, 2.0]));
        let x = t.constant(Matrix::from_vec(3, 1, vec![4.0, 5.0, -6.0]).unwrap());
        let loss = t.matmul(w, x).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(w).as_slice(), &[4.0, 5.0, -6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut t = Tape::new();
        let w = t.param(Matrix::row_vector(&[1.0, 2.0]));
        let c = t.constant(Matrix::scalar(3.0));
        let loss = t.scale(c, 2.0);
        let _unused = t.square(w);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(w).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.param(Matrix::row_vector(&[1.0, 2.0]));
        assert!(matches!(
            t.backward(w),
            Err(TensorError::NonScalarLoss { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn log_space_helpers_stay_finite() {
        assert!((log_sum_exp(&[500.0, 500.0]) - (500.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[-500.0, -500.0]) - (-500.0 + 2f64.ln())).abs() < 1e-12);
        assert!(bce_logit(500.0, 1.0).abs() < 1e-12);
        assert!((bce_logit(-500.0, 1.0) - 500.0).abs() < 1e-9);
        assert!((bce_logit(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn relu_gradient_masks_negative_inputs() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row_vector(&[-1.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).as_slice(), &[0.0, 2.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).as_slice(), &[0.0, 1.0]);
    }
}
