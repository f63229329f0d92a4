//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`GradTape`] records every operation as it is evaluated. Nodes are only
//! ever appended, so parents always precede children and the backward pass is
//! a single reverse sweep. Leaves are created with an explicit
//! `requires_grad` flag; nodes whose ancestors never require a gradient are
//! skipped during the sweep, which is what keeps input gradients opt-in.

use crate::error::{Error, Result};
use crate::tensor::matrix::{logsumexp, rowwise_softmax, Matrix};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Supervision for the fused softmax cross-entropy node.
#[derive(Debug, Clone)]
pub enum Targets {
    /// One class index per row.
    Labels(Vec<usize>),
    /// A probability distribution per row (`rows x k`).
    Soft(Matrix),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    RowL2Norm(Var),
    DivByColumn(Var, Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Targets,
        probs: Matrix,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar node with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
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

    /// Parent indices of a node, for inspecting tape structure.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddRowBias(a, b)
            | Op::Add(a, b)
            | Op::Hadamard(a, b)
            | Op::DivByColumn(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::RowL2Norm(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, needs))
    }

    /// Adds a `1 x cols` bias row to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row_vector(self.value(bias))?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddRowBias(x, bias), value, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, needs))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Hadamard(a, b), value, needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Scale(a, s), value, needs))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map("add_scalar", |v| v + c)?;
        let needs = self.needs(a);
        Ok(self.push(Op::AddScalar(a), value, needs))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        let needs = self.needs(a);
        self.push(Op::Relu(a), value, needs)
    }

    /// Euclidean norm of each row, as a `rows x 1` column.
    pub fn row_l2_norm(&mut self, a: Var) -> Var {
        let norms = crate::tensor::matrix::row_l2_norm(self.value(a));
        let value = Matrix::from_raw(norms.len(), 1, norms);
        let needs = self.needs(a);
        self.push(Op::RowL2Norm(a), value, needs)
    }

    /// Divides row `i` of `a` by entry `i` of the column `denom`.
    pub fn div_by_column(&mut self, a: Var, denom: Var) -> Result<Var> {
        let (x, d) = (self.value(a), self.value(denom));
        if d.cols() != 1 || d.rows() != x.rows() {
            return Err(Error::shape(
                "div_by_column",
                format!("denominator {}x{} for {}x{}", d.rows(), d.cols(), x.rows(), x.cols()),
            ));
        }
        let cols = x.cols();
        let mut data = x.as_slice().to_vec();
        for (r, row) in data.chunks_mut(cols.max(1)).enumerate() {
            let div = d.get(r, 0);
            for v in row {
                *v /= div;
            }
        }
        let value = Matrix::checked("div_by_column", x.rows(), cols, data)?;
        let needs = self.needs(a) || self.needs(denom);
        Ok(self.push(Op::DivByColumn(a, denom), value, needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_raw(1, 1, vec![self.value(a).sum()]);
        let needs = self.needs(a);
        self.push(Op::Sum(a), value, needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let value = Matrix::from_raw(1, 1, vec![m.sum() / m.len() as f64]);
        let needs = self.needs(a);
        Ok(self.push(Op::Mean(a), value, needs))
    }

    /// Batch-mean cross-entropy between `softmax(logits)` and `targets`,
    /// fused so the backward pass is `softmax - targets` with no `log(0)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Targets) -> Result<Var> {
        let z = self.value(logits);
        let (n, k) = z.shape();
        if n == 0 {
            return Err(Error::shape("softmax_cross_entropy", "empty batch"));
        }
        let mut total = 0.0;
        match &targets {
            Targets::Labels(labels) => {
                if labels.len() != n {
                    return Err(Error::shape(
                        "softmax_cross_entropy",
                        format!("{} labels for {n} rows", labels.len()),
                    ));
                }
                for (row, &y) in z.row_iter().zip(labels) {
                    if y >= k {
                        return Err(Error::Data(format!("label {y} out of range for {k} classes")));
                    }
                    total += logsumexp(row) - row[y];
                }
            }
            Targets::Soft(t) => {
                if t.shape() != z.shape() {
                    return Err(Error::shape(
                        "softmax_cross_entropy",
                        format!("targets {}x{} for logits {n}x{k}", t.rows(), t.cols()),
                    ));
                }
                for (row, trow) in z.row_iter().zip(t.row_iter()) {
                    let lse = logsumexp(row);
                    total += row.iter().zip(trow).map(|(&v, &p)| p * (lse - v)).sum::<f64>();
                }
            }
        }
        let value = Matrix::checked("softmax_cross_entropy", 1, 1, vec![total / n as f64])?;
        let probs = rowwise_softmax(z);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
            value,
            needs,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Contract(format!(
                "backward needs a scalar loss node, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::from_raw(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.matmul_nt(self.value(*b))?)?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, self.value(*a).matmul_tn(&g)?)?;
                    }
                }
                Op::AddRowBias(x, bias) => {
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, g.sum_rows())?;
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Hadamard(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.hadamard(self.value(*b))?)?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.hadamard(self.value(*a))?)?;
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)?)?,
                Op::AddScalar(a) => accumulate(&mut grads, *a, g)?,
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(x.as_slice())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Matrix::from_raw(x.rows(), x.cols(), data))?;
                }
                Op::RowL2Norm(a) => {
                    let x = self.value(*a);
                    let norms = &node.value;
                    let cols = x.cols();
                    let mut data = vec![0.0; x.len()];
                    for r in 0..x.rows() {
                        let n = norms.get(r, 0);
                        if n > 0.0 {
                            let scale = g.get(r, 0) / n;
                            for c in 0..cols {
                                data[r * cols + c] = scale * x.get(r, c);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Matrix::checked("row_l2_norm backward", x.rows(), cols, data)?)?;
                }
                Op::DivByColumn(a, denom) => {
                    let x = self.value(*a);
                    let d = self.value(*denom);
                    let cols = x.cols();
                    if self.needs(*denom) {
                        let mut gd = vec![0.0; d.rows()];
                        for (r, slot) in gd.iter_mut().enumerate() {
                            let dv = d.get(r, 0);
                            let dot: f64 = g.row(r).iter().zip(x.row(r)).map(|(a, b)| a * b).sum();
                            *slot = -dot / (dv * dv);
                        }
                        accumulate(&mut grads, *denom, Matrix::checked("div_by_column backward", d.rows(), 1, gd)?)?;
                    }
                    if self.needs(*a) {
                        let mut ga = g.as_slice().to_vec();
                        for (r, row) in ga.chunks_mut(cols.max(1)).enumerate() {
                            let dv = d.get(r, 0);
                            for v in row {
                                *v /= dv;
                            }
                        }
                        accumulate(&mut grads, *a, Matrix::checked("div_by_column backward", x.rows(), cols, ga)?)?;
                    }
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, Matrix::filled(x.rows(), x.cols(), g.item()?)?)?;
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let v = g.item()? / x.len() as f64;
                    accumulate(&mut grads, *a, Matrix::filled(x.rows(), x.cols(), v)?)?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let (n, k) = probs.shape();
                    let scale = g.item()? / n as f64;
                    let mut data = probs.as_slice().to_vec();
                    match targets {
                        Targets::Labels(labels) => {
                            for (r, &y) in labels.iter().enumerate() {
                                data[r * k + y] -= 1.0;
                            }
                        }
                        Targets::Soft(t) => {
                            for (d, &tv) in data.iter_mut().zip(t.as_slice()) {
                                *d -= tv;
                            }
                        }
                    }
                    for d in &mut data {
                        *d *= scale;
                    }
                    accumulate(&mut grads, *logits, Matrix::from_raw(n, k, data))?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(Error::shape("backward", "gradient shape mismatch"));
            }
            for (e, n) in existing.data_mut().iter_mut().zip(g.as_slice()) {
                *e += n;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
