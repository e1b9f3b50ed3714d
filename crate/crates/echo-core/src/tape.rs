//! Tape-based reverse-mode differentiation over matrix values.
//!
//! A `Tape` records primitive operations in topological order during the
//! forward pass; `backward` walks it once in reverse, producing exact
//! gradients for every node. The recurrent feedback edge of
//! output-conditioned gating (the previous step's projection entering the
//! next step's gates) falls out of the recording automatically, which is
//! why the trainer uses a tape instead of hand-derived BPTT.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Scale(NodeId, f64),
    /// Softmax over all entries of a node.
    Softmax(NodeId),
    /// Frobenius inner product -> 1x1.
    Dot(NodeId, NodeId),
    /// `a * s[idx]` where `s` is any node and `idx` a flat entry index.
    MulEntry { a: NodeId, s: NodeId, idx: usize },
    /// Stack 1x1 nodes into an n-x-1 column.
    ConcatRows(Vec<NodeId>),
    /// Column `col` of a matrix as a column vector.
    ColSelect { m: NodeId, col: usize },
    /// Sum of all entries -> 1x1.
    SumAll(NodeId),
    /// `-log softmax(logits)[label]` -> 1x1, fused for stability.
    CrossEntropy { logits: NodeId, label: usize },
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients of the loss with respect to named parameters.
#[derive(Debug, Clone, Default)]
pub struct GradientSet {
    by_name: BTreeMap<String, Matrix>,
}

impl GradientSet {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.by_name.get(name)
    }

    pub fn insert(&mut self, name: String, grad: Matrix) {
        self.by_name.insert(name, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.by_name.values().all(|m| m.all_finite())
    }

    /// L2 norm over every entry of every gradient.
    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .by_name
            .values()
            .map(|m| m.data().iter().map(|x| x * x).sum::<f64>())
            .sum();
        libm::sqrt(sq)
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for m in self.by_name.values_mut() {
            for x in m.data_mut() {
                *x *= factor;
            }
        }
    }
}

/// Result of a backward pass: per-node gradients plus name resolution.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn of(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    hidden_marks: Vec<NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    /// Mark a node as a hidden state h_t for gradient-norm diagnostics.
    pub fn mark_hidden(&mut self, id: NodeId) {
        self.hidden_marks.push(id);
    }

    pub fn hidden_marks(&self) -> &[NodeId] {
        &self.hidden_marks
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.add(&self.nodes[b].value)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.sub(&self.nodes[b].value)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.hadamard(&self.nodes[b].value)?;
        Ok(self.push(Op::Hadamard(a, b), v))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.sigmoid();
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.tanh();
        self.push(Op::Tanh(a), v)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.nodes[a].value.scale(factor);
        self.push(Op::Scale(a, factor), v)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.softmax();
        self.push(Op::Softmax(a), v)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.nodes[a].value.dot(&self.nodes[b].value)?;
        Ok(self.push(Op::Dot(a, b), Matrix::from_vec(1, 1, vec![d])))
    }

    pub fn mul_entry(&mut self, a: NodeId, s: NodeId, idx: usize) -> Result<NodeId> {
        if idx >= self.nodes[s].value.len() {
            return Err(Error::Contract(format!(
                "mul_entry index {idx} out of range for node of {} entries",
                self.nodes[s].value.len()
            )));
        }
        let factor = self.nodes[s].value.data()[idx];
        let v = self.nodes[a].value.scale(factor);
        Ok(self.push(Op::MulEntry { a, s, idx }, v))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Domain("concat_rows of zero nodes".into()));
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.nodes[p].value;
            if v.shape() != (1, 1) {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: (1, 1),
                    rhs: v.shape(),
                });
            }
            data.push(v.get(0, 0));
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Matrix::column(data)))
    }

    pub fn col_select(&mut self, m: NodeId, col: usize) -> Result<NodeId> {
        let src = &self.nodes[m].value;
        if col >= src.cols() {
            return Err(Error::Data {
                msg: format!("column {col} out of range ({} columns)", src.cols()),
                position: None,
            });
        }
        let data: Vec<f64> = (0..src.rows()).map(|r| src.get(r, col)).collect();
        Ok(self.push(Op::ColSelect { m, col }, Matrix::column(data)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        self.push(Op::SumAll(a), Matrix::from_vec(1, 1, vec![s]))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let v = &self.nodes[logits].value;
        if label >= v.len() {
            return Err(Error::Data {
                msg: format!("label {label} out of range for {} logits", v.len()),
                position: None,
            });
        }
        let lse = crate::matrix::log_sum_exp(v.data());
        let loss = lse - v.data()[label];
        Ok(self.push(
            Op::CrossEntropy { logits, label },
            Matrix::from_vec(1, 1, vec![loss]),
        ))
    }

    /// Exact reverse-mode gradients for every node reachable from `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let out = &self.nodes[loss].value;
        if out.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss node, got {}x{}",
                out.rows(),
                out.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Matrix::ones(1, 1));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) -> Result<()> {
        match &mut grads[id] {
            Some(g) => g.add_assign(&delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    fn accumulate_inputs(
        &self,
        id: NodeId,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // d(A·B): gA = g·Bᵀ, gB = Aᵀ·g
                let ga = g.matmul_nt(&self.nodes[*b].value)?;
                let gb = self.nodes[*a].value.matmul_tn(g)?;
                Self::accum(grads, *a, ga)?;
                Self::accum(grads, *b, gb)?;
            }
            Op::Add(a, b) => {
                Self::accum(grads, *a, g.clone())?;
                Self::accum(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                Self::accum(grads, *a, g.clone())?;
                Self::accum(grads, *b, g.scale(-1.0))?;
            }
            Op::Hadamard(a, b) => {
                Self::accum(grads, *a, g.hadamard(&self.nodes[*b].value)?)?;
                Self::accum(grads, *b, g.hadamard(&self.nodes[*a].value)?)?;
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let dy = y.map(|v| v * (1.0 - v));
                Self::accum(grads, *a, g.hadamard(&dy)?)?;
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let dy = y.map(|v| 1.0 - v * v);
                Self::accum(grads, *a, g.hadamard(&dy)?)?;
            }
            Op::Scale(a, factor) => {
                Self::accum(grads, *a, g.scale(*factor))?;
            }
            Op::Softmax(a) => {
                // gx = (g - <g,y>) ⊙ y
                let y = &self.nodes[id].value;
                let gy = g.dot(y)?;
                let gx = g.map(|v| v - gy).hadamard(y)?;
                Self::accum(grads, *a, gx)?;
            }
            Op::Dot(a, b) => {
                let s = g.get(0, 0);
                Self::accum(grads, *a, self.nodes[*b].value.scale(s))?;
                Self::accum(grads, *b, self.nodes[*a].value.scale(s))?;
            }
            Op::MulEntry { a, s, idx } => {
                let factor = self.nodes[*s].value.data()[*idx];
                Self::accum(grads, *a, g.scale(factor))?;
                let mut gs = Matrix::zeros(
                    self.nodes[*s].value.rows(),
                    self.nodes[*s].value.cols(),
                );
                gs.data_mut()[*idx] = g.dot(&self.nodes[*a].value)?;
                Self::accum(grads, *s, gs)?;
            }
            Op::ConcatRows(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    let gp = Matrix::from_vec(1, 1, vec![g.data()[i]]);
                    Self::accum(grads, p, gp)?;
                }
            }
            Op::ColSelect { m, col } => {
                let src = &self.nodes[*m].value;
                let mut gm = Matrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    gm.set(r, *col, g.data()[r]);
                }
                Self::accum(grads, *m, gm)?;
            }
            Op::SumAll(a) => {
                let src = &self.nodes[*a].value;
                let s = g.get(0, 0);
                Self::accum(grads, *a, Matrix::filled(src.rows(), src.cols(), s))?;
            }
            Op::CrossEntropy { logits, label } => {
                // d loss / d logits = softmax(logits) - onehot(label)
                let mut gl = self.nodes[*logits].value.softmax();
                gl.data_mut()[*label] -= 1.0;
                let s = g.get(0, 0);
                Self::accum(grads, *logits, gl.scale(s))?;
            }
        }
        Ok(())
    }

    /// L2 norm of dLoss/dh_t for every marked hidden state, in mark order.
    pub fn hidden_grad_norms(&self, grads: &Gradients) -> Result<Vec<f64>> {
        if self.hidden_marks.is_empty() {
            return Err(Error::Contract(
                "no hidden states marked on this tape".into(),
            ));
        }
        Ok(self
            .hidden_marks
            .iter()
            .map(|&id| grads.of(id).map(|m| m.frobenius_norm()).unwrap_or(0.0))
            .collect())
    }
}
