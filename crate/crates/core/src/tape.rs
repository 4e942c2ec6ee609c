//! Reverse-mode autodiff on a Wengert tape.
//!
//! The tape is define-by-run: every forward pass appends nodes (operation,
//! parent ids, cached output) to a fresh [`Tape`], and [`Tape::backward`]
//! replays them in reverse, accumulating adjoints into one gradient slot per
//! node. Parents always have lower ids than their children, so a single
//! reverse sweep visits every node after all of its consumers.
//!
//! All operations validate operand shapes (errors name both shapes) and
//! check their outputs for NaN/Inf, so a numeric blow-up surfaces at the op
//! that produced it rather than as a corrupted loss.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    SoftmaxRows(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SumRows(NodeId),
    RepeatRows(NodeId, usize),
    SumAll(NodeId),
    Mse(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Row-wise softmax with temperature, max-subtracted for stability.
pub fn softmax_rows(x: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("softmax temperature must be positive, got {tau}")));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Define-by-run tape. Build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
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
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root with respect to node `id`, or
    /// None if the node does not influence the root.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Like [`Tape::grad`] but materializes zeros for uninfluential nodes.
    pub fn grad_or_zeros(&self, id: NodeId) -> Matrix {
        match self.grad(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.nodes[id.0].value.shape();
                Matrix::zeros(r, c)
            }
        }
    }

    fn push(&mut self, op: Op, value: Matrix, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Registers an input or parameter matrix.
    pub fn leaf(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(Op::Leaf, value, "leaf")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).transpose();
        self.push(Op::Transpose(x), value, "transpose")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), value, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), value, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        self.push(Op::Mul(a, b), value, "mul")
    }

    /// Broadcasts a 1 x cols row vector over the rows of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let value = self.value(x).add_row_broadcast(self.value(row))?;
        self.push(Op::AddRow(x, row), value, "add_row")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let value = self.value(x).scale(c);
        self.push(Op::Scale(x, c), value, "scale")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), value, "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(x), value, "sigmoid")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), value, "tanh")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), value, "exp")
    }

    /// Natural log. Errors if any input is outside the domain (<= 0).
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(f64::ln);
        self.push(Op::Log(x), value, "log")
    }

    /// Row-wise softmax with temperature `tau`.
    pub fn softmax_rows(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        let value = softmax_rows(self.value(x), tau)?;
        self.push(Op::SoftmaxRows(x, tau), value, "softmax_rows")
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).concat_cols(self.value(b))?;
        self.push(Op::ConcatCols(a, b), value, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let value = self.value(x).slice_rows(start, len)?;
        self.push(Op::SliceRows(x, start, len), value, "slice_rows")
    }

    /// Column sums as a 1 x cols row vector. Bitwise invariant under row
    /// permutations of the input (sorted accumulation order).
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).sum_rows()?;
        self.push(Op::SumRows(x), value, "sum_rows")
    }

    /// Repeats a 1 x cols row into `n` rows.
    pub fn repeat_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let value = self.value(x).repeat_rows(n)?;
        self.push(Op::RepeatRows(x, n), value, "repeat_rows")
    }

    /// Sum of all entries as a 1 x 1 matrix.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Matrix::from_vec(1, 1, vec![self.value(x).sum()])?;
        self.push(Op::SumAll(x), value, "sum_all")
    }

    /// Mean over rows of the squared Euclidean distance between matching
    /// rows of `x` and `x_hat`, as a 1 x 1 matrix.
    pub fn mse(&mut self, x: NodeId, x_hat: NodeId) -> Result<NodeId> {
        let (a, b) = (self.value(x), self.value(x_hat));
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        if a.rows() == 0 {
            return Err(Error::Config("mse on empty matrix".into()));
        }
        let sum: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&u, &v)| (u - v) * (u - v))
            .sum();
        let value = Matrix::from_vec(1, 1, vec![sum / a.rows() as f64])?;
        self.push(Op::Mse(x, x_hat), value, "mse")
    }

    /// Reverse sweep from a scalar root. Fills one gradient slot per node
    /// reachable from the root; earlier gradients are discarded.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Config(format!(
                "backward root must be 1x1, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            match self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[b.0].value.transpose())?;
                    let db = self.nodes[a.0].value.transpose().matmul(&g)?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                Op::Transpose(x) => accumulate(&mut grads, x, g.transpose())?,
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone())?;
                    accumulate(&mut grads, b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a, g.clone())?;
                    accumulate(&mut grads, b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(&self.nodes[b.0].value)?;
                    let db = g.hadamard(&self.nodes[a.0].value)?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                Op::AddRow(x, row) => {
                    let mut drow = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, &v) in drow.data_mut().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, x, g)?;
                    accumulate(&mut grads, row, drow)?;
                }
                Op::Scale(x, c) => accumulate(&mut grads, x, g.scale(c))?,
                Op::Relu(x) => {
                    let dx = g.hadamard(&self.nodes[x.0].value.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))?;
                    accumulate(&mut grads, x, dx)?;
                }
                Op::Sigmoid(x) => {
                    let s = &self.nodes[id].value;
                    let dx = g.hadamard(&s.map(|v| v * (1.0 - v)))?;
                    accumulate(&mut grads, x, dx)?;
                }
                Op::Tanh(x) => {
                    let t = &self.nodes[id].value;
                    let dx = g.hadamard(&t.map(|v| 1.0 - v * v))?;
                    accumulate(&mut grads, x, dx)?;
                }
                Op::Exp(x) => {
                    let dx = g.hadamard(&self.nodes[id].value)?;
                    accumulate(&mut grads, x, dx)?;
                }
                Op::Log(x) => {
                    let dx = g.hadamard(&self.nodes[x.0].value.map(|v| 1.0 / v))?;
                    accumulate(&mut grads, x, dx)?;
                }
                Op::SoftmaxRows(x, tau) => {
                    let s = &self.nodes[id].value;
                    let mut dx = Matrix::zeros(s.rows(), s.cols());
                    for i in 0..s.rows() {
                        let srow = s.row(i);
                        let grow = g.row(i);
                        let dot: f64 = srow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = srow[j] * (grow[j] - dot) / tau;
                        }
                    }
                    accumulate(&mut grads, x, dx)?;
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.nodes[a.0].value.cols();
                    let bc = self.nodes[b.0].value.cols();
                    accumulate(&mut grads, a, g.slice_cols(0, ac)?)?;
                    accumulate(&mut grads, b, g.slice_cols(ac, bc)?)?;
                }
                Op::SliceRows(x, start, _len) => {
                    let (r, c) = self.nodes[x.0].value.shape();
                    let mut dx = Matrix::zeros(r, c);
                    for i in 0..g.rows() {
                        dx.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, x, dx)?;
                }
                Op::SumRows(x) => {
                    let n = self.nodes[x.0].value.rows();
                    accumulate(&mut grads, x, g.repeat_rows(n)?)?;
                }
                Op::RepeatRows(x, _n) => {
                    let mut dx = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, &v) in dx.data_mut().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, x, dx)?;
                }
                Op::SumAll(x) => {
                    let (r, c) = self.nodes[x.0].value.shape();
                    accumulate(&mut grads, x, Matrix::filled(r, c, g.get(0, 0)))?;
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let scale = 2.0 * g.get(0, 0) / va.rows() as f64;
                    let diff = va.sub(vb)?;
                    accumulate(&mut grads, a, diff.scale(scale))?;
                    accumulate(&mut grads, b, diff.scale(-scale))?;
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(delta),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_matches_frozen_values() {
        let x = Matrix::row_vector(vec![1.0, 2.0, 3.0]);
        let s = softmax_rows(&x, 1.0).unwrap();
        let expect = [
            0.09003057317038046,
            0.24472847105479765,
            0.6652409557748219,
        ];
        for (a, e) in s.data().iter().zip(expect) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(s.data().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_under_extreme_inputs() {
        let x = Matrix::from_rows(&[vec![1000.0, -1000.0, 0.0], vec![-700.0, -700.0, -700.0]]).unwrap();
        let s = softmax_rows(&x, 0.01).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(s.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sum_all_gradient_is_ones() {
        let mut t = Tape::new();
        let p = t.leaf(Matrix::from_fn(2, 3, |i, j| (i + j) as f64)).unwrap();
        let loss = t.sum_all(p).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(p).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gradient_is_input() {
        let mut t = Tape::new();
        let p = t.leaf(Matrix::row_vector(vec![0.5, -1.25, 2.0])).unwrap();
        let sq = t.mul(p, p).unwrap();
        let s = t.sum_all(sq).unwrap();
        let loss = t.scale(s, 0.5).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(p).unwrap().data(), &[0.5, -1.25, 2.0]);
    }

    #[test]
    fn mse_example_value_and_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(vec![1.0, 2.0])).unwrap();
        let x_hat = t.leaf(Matrix::row_vector(vec![0.0, 0.0])).unwrap();
        let loss = t.mse(x, x_hat).unwrap();
        assert_eq!(t.value(loss).get(0, 0), 5.0);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(t.grad(x_hat).unwrap().data(), &[-2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let p = t.leaf(Matrix::zeros(2, 2)).unwrap();
        assert!(t.backward(p).is_err());
    }

    #[test]
    fn log_domain_violation_is_an_error() {
        let mut t = Tape::new();
        let p = t.leaf(Matrix::row_vector(vec![1.0, -2.0])).unwrap();
        assert!(matches!(t.log(p), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut t = Tape::new();
        let p = t.leaf(Matrix::row_vector(vec![1000.0])).unwrap();
        assert!(matches!(t.exp(p), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn matmul_chain_gradient_known_value() {
        // loss = sum(a * b) with a = [1, 2; 3, 4], b = [1; 1]
        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = t.leaf(Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
        let prod = t.matmul(a, b).unwrap();
        let loss = t.sum_all(prod).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.grad(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // loss = sum(p + p) so dL/dp = 2
        let mut t = Tape::new();
        let p = t.leaf(Matrix::row_vector(vec![3.0])).unwrap();
        let s = t.add(p, p).unwrap();
        let loss = t.sum_all(s).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn slice_rows_gradient_lands_in_slice() {
        let mut t = Tape::new();
        let p = t.leaf(Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64)).unwrap();
        let row = t.slice_rows(p, 1, 1).unwrap();
        let loss = t.sum_all(row).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(p).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_is_none_for_uninfluential_node() {
        let mut t = Tape::new();
        let p = t.leaf(Matrix::row_vector(vec![1.0])).unwrap();
        let q = t.leaf(Matrix::row_vector(vec![2.0])).unwrap();
        let loss = t.sum_all(p).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(q).is_none());
        assert_eq!(t.grad_or_zeros(q).data(), &[0.0]);
    }
}
