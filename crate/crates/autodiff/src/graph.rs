//! Define-by-run tape.
//!
//! Every operation appends a node holding its output value; `backward`
//! walks the nodes in exact reverse insertion order. A fresh [`Graph`] is
//! built for each forward pass.

use crate::error::{AutodiffError, Result};
use crate::tensor::{gemm, softmax_in_place, Layout, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Tensor),
    MulRowConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Square(Var),
    Sum(Var),
    SliceCols(Var, usize, usize),
    CrossEntropy {
        logits: Var,
        targets: Tensor,
        weights: Vec<f64>,
        class_mask: Option<Vec<bool>>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves a gradient out, substituting zeros of `shape` when the node
    /// was never reached.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if cfg!(debug_assertions) && !t.all_finite() {
        return Err(AutodiffError::NonFinite { op });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), out, rg, "matmul")
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let n = xv.cols();
        if xv.shape().len() != 2 || bv.len() != n {
            return Err(AutodiffError::Shape {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                for (o, &b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(Op::AddBias(x, bias), out, rg, "add_bias")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), out, rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), out, rg, "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(Op::Scale(x, s), out, rg, "scale")
    }

    /// `x + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let out = self.value(x).add(c)?;
        let rg = self.rg(x);
        self.push(Op::AddConst(x), out, rg, "add_const")
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let out = self.value(x).mul(&c)?;
        let rg = self.rg(x);
        self.push(Op::MulConst(x, c), out, rg, "mul_const")
    }

    /// Multiplies column j of every row by `c[j]`.
    pub fn mul_row_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if c.len() != n {
            return Err(AutodiffError::Shape {
                op: "mul_row_const",
                left: xv.shape().to_vec(),
                right: vec![c.len()],
            });
        }
        let mut out = xv.clone();
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                for (o, &m) in row.iter_mut().zip(&c) {
                    *o *= m;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Op::MulRowConst(x, c), out, rg, "mul_row_const")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(Op::Relu(x), out, rg, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), out, rg, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(Op::Tanh(x), out, rg, "tanh")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows();
        let rg = self.rg(x);
        self.push(Op::Softmax(x), out, rg, "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Op::LogSoftmax(x), out, rg, "log_softmax")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(Op::Square(x), out, rg, "square")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::Sum(x), out, rg, "sum")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.matrix_dims("slice_cols")?;
        if start > end || end > n {
            return Err(AutodiffError::Invalid(format!(
                "slice_cols {start}..{end} out of range for {n} columns"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&xv.row(i)[start..end]);
        }
        let out = Tensor::new(vec![m, w], out)?;
        let rg = self.rg(x);
        self.push(Op::SliceCols(x, start, end), out, rg, "slice_cols")
    }

    /// Weighted cross-entropy of softmax(logits) against `targets`.
    ///
    /// Returns `Σ_b w_b · (−Σ_c t_bc log p_bc)` where `p` is the softmax over
    /// the classes allowed by `class_mask` (masked classes get probability
    /// exactly 0). `weights` defaults to `1/b` for every row, which gives the
    /// batch mean. Rows with weight 0 are not validated.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Tensor,
        weights: Option<Vec<f64>>,
        class_mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.matrix_dims("cross_entropy")?;
        if targets.shape() != lv.shape() {
            return Err(AutodiffError::Shape {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let weights = weights.unwrap_or_else(|| vec![1.0 / b.max(1) as f64; b]);
        if weights.len() != b {
            return Err(AutodiffError::Shape {
                op: "cross_entropy",
                left: vec![b],
                right: vec![weights.len()],
            });
        }
        if let Some(mask) = &class_mask {
            if mask.len() != c {
                return Err(AutodiffError::Shape {
                    op: "cross_entropy",
                    left: vec![c],
                    right: vec![mask.len()],
                });
            }
            if !mask.iter().any(|&m| m) {
                return Err(AutodiffError::Invalid("class mask has no active class".into()));
            }
        }
        let active = |j: usize| class_mask.as_ref().is_none_or(|m| m[j]);
        let mut probs = Tensor::zeros(&[b, c]);
        let mut loss = 0.0;
        for i in 0..b {
            let t = targets.row(i);
            if weights[i] != 0.0 {
                let total: f64 = t.iter().sum();
                if (total - 1.0).abs() > 1e-9 || t.iter().any(|&x| x < 0.0) {
                    return Err(AutodiffError::Invalid(format!(
                        "target row {i} must be a distribution (sums to {total})"
                    )));
                }
                if (0..c).any(|j| !active(j) && t[j] != 0.0) {
                    return Err(AutodiffError::Invalid(format!(
                        "target row {i} puts mass on a masked class"
                    )));
                }
            }
            let row = lv.row(i);
            let max = (0..c)
                .filter(|&j| active(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..c)
                    .filter(|&j| active(j))
                    .map(|j| (row[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            let p = probs.row_mut(i);
            let mut row_loss = 0.0;
            for j in 0..c {
                if active(j) {
                    let logp = row[j] - lse;
                    p[j] = logp.exp();
                    if t[j] != 0.0 {
                        row_loss -= t[j] * logp;
                    }
                }
            }
            loss += weights[i] * row_loss;
        }
        let rg = self.rg(logits);
        self.push(
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                class_mask,
                probs,
            },
            Tensor::scalar(loss),
            rg,
            "cross_entropy",
        )
    }

    /// Probabilities cached by a cross-entropy node.
    pub fn cross_entropy_probs(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::Invalid(format!(
                "backward needs a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if self.rg(*a) {
                        // dA = G·Bᵀ
                        self.accumulate_with(&mut grads, *a, |dst, beta| {
                            gemm(m, n, k, g.data(), Layout::Normal, bv.data(), Layout::Transposed, dst, beta)
                        });
                    }
                    if self.rg(*b) {
                        // dB = Aᵀ·G
                        self.accumulate_with(&mut grads, *b, |dst, beta| {
                            gemm(k, m, n, av.data(), Layout::Transposed, g.data(), Layout::Normal, dst, beta)
                        });
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.rg(*bias) {
                        let n = g.cols();
                        let mut db = vec![0.0; n];
                        for row in g.data().chunks(n.max(1)) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        self.accumulate(&mut grads, *bias, Tensor::new(shape, db)?);
                    }
                    if self.rg(*x) {
                        self.accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        self.accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        self.accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        self.accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                    if self.rg(*a) {
                        self.accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let d = g.mul(self.value(*b))?;
                        self.accumulate(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let d = g.mul(self.value(*a))?;
                        self.accumulate(&mut grads, *b, d);
                    }
                }
                Op::Scale(x, s) => {
                    self.accumulate(&mut grads, *x, g.scale(*s));
                }
                Op::AddConst(x) => {
                    self.accumulate(&mut grads, *x, g);
                }
                Op::MulConst(x, c) => {
                    self.accumulate(&mut grads, *x, g.mul(c)?);
                }
                Op::MulRowConst(x, c) => {
                    let mut d = g;
                    let n = c.len();
                    if n > 0 {
                        for row in d.data_mut().chunks_mut(n) {
                            for (o, &m) in row.iter_mut().zip(c) {
                                *o *= m;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Relu(x) => {
                    let d = g.zip_map(&node.value, "relu_backward", |gv, y| if y > 0.0 { gv } else { 0.0 })?;
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = g.zip_map(&node.value, "sigmoid_backward", |gv, y| gv * y * (1.0 - y))?;
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Tanh(x) => {
                    let d = g.zip_map(&node.value, "tanh_backward", |gv, y| gv * (1.0 - y * y))?;
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = g;
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &mut d.data_mut()[i * c..(i + 1) * c];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, &yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    self.accumulate(&mut grads, *x, d);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = g;
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &mut d.data_mut()[i * c..(i + 1) * c];
                        let total: f64 = gr.iter().sum();
                        for (gv, &lp) in gr.iter_mut().zip(yr) {
                            *gv -= lp.exp() * total;
                        }
                    }
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Square(x) => {
                    let d = g.zip_map(self.value(*x), "square_backward", |gv, v| 2.0 * v * gv)?;
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(&mut grads, *x, Tensor::full(&shape, g.item()));
                }
                Op::SliceCols(x, start, end) => {
                    let xv = self.value(*x);
                    let (m, n) = (xv.rows(), xv.cols());
                    let w = end - start;
                    let mut d = Tensor::zeros(xv.shape());
                    for i in 0..m {
                        d.data_mut()[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    self.accumulate(&mut grads, *x, d);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    class_mask,
                    probs,
                } => {
                    let scale = g.item();
                    let c = probs.cols();
                    let mut d = probs.clone();
                    for (i, &w) in weights.iter().enumerate() {
                        let t = targets.row(i);
                        let row = &mut d.data_mut()[i * c..(i + 1) * c];
                        for j in 0..c {
                            let on = class_mask.as_ref().is_none_or(|m| m[j]);
                            row[j] = if on { scale * w * (row[j] - t[j]) } else { 0.0 };
                        }
                    }
                    self.accumulate(&mut grads, *logits, d);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(d),
        }
    }

    /// Runs `f(dst, beta)` writing straight into the gradient buffer of `v`.
    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64], f64)) {
        match &mut grads[v.0] {
            Some(existing) => f(existing.data_mut(), 1.0),
            slot @ None => {
                let mut t = Tensor::zeros(self.value(v).shape());
                f(t.data_mut(), 0.0);
                *slot = Some(t);
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

/// Softmax of a single row, returned as a new vector.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_tanh_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(x).unwrap();
        let t = g.tanh(x).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(t).item(), 0.0);
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 10]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 10]));
        let mut t = Tensor::zeros(&[1, 10]);
        t.set2(0, 3, 1.0);
        let l = g.cross_entropy(x, t, None, None).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_peaked_logits() {
        let mut g = Graph::new();
        let mut logits = Tensor::zeros(&[1, 10]);
        logits.set2(0, 7, 50.0);
        let x = g.param(logits);
        let mut t = Tensor::zeros(&[1, 10]);
        t.set2(0, 7, 1.0);
        let l = g.cross_entropy(x, t, None, None).unwrap();
        assert!(g.value(l).item() < 1e-8);
    }

    #[test]
    fn cross_entropy_rejects_bad_target_row() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 3]));
        let t = Tensor::from_rows(&[vec![0.5, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            g.cross_entropy(x, t, None, None),
            Err(AutodiffError::Invalid(_))
        ));
    }

    #[test]
    fn masked_classes_get_zero_probability_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap());
        let t = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let mask = vec![true, true, false, false];
        let l = g.cross_entropy(x, t, None, Some(mask)).unwrap();
        let probs = g.cross_entropy_probs(l).unwrap();
        assert_eq!(probs.get2(0, 2), 0.0);
        assert_eq!(probs.get2(0, 3), 0.0);
        assert!((probs.get2(0, 0) + probs.get2(0, 1) - 1.0).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        let d = grads.get(x).unwrap();
        assert_eq!(d.get2(0, 2), 0.0);
        assert_eq!(d.get2(0, 3), 0.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 2]));
        let w = g.param(Tensor::ones(&[2, 2]));
        let y = g.matmul(a, w).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(3.0));
        let y = g.mul(w, w).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(Tensor::ones(&[2]));
        assert!(g.backward(w).is_err());
    }
}
