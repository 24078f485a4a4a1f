//! A reverse-mode differentiation tape over dense matrices.
//!
//! Every value on the tape is a 2-D `f64` array; scalars are `1x1`. Nodes are
//! appended in evaluation order, which is therefore a topological order, and
//! the backward pass walks the tape once in reverse. Model-specific fused
//! kernels plug in through [`CustomOp`].

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use crate::error::{input, Result};
use crate::sparse::SparseMatrix;

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the tape.
///
/// `backward` returns one optional gradient per input, in input order.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

/// A constant sparse matrix together with its transpose, used as the left
/// operand of a sparse-dense product.
#[derive(Clone)]
pub struct SparseOperator {
    forward: Arc<SparseMatrix>,
    transposed: Arc<SparseMatrix>,
}

impl SparseOperator {
    pub fn new(matrix: SparseMatrix) -> Self {
        let transposed = Arc::new(matrix.transpose());
        Self {
            forward: Arc::new(matrix),
            transposed,
        }
    }

    /// The operator for the transposed matrix, sharing storage.
    pub fn transposed(&self) -> Self {
        Self {
            forward: Arc::clone(&self.transposed),
            transposed: Arc::clone(&self.forward),
        }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.forward
    }
}

impl fmt::Debug for SparseOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SparseOperator({}x{}, nnz={})",
            self.forward.n_rows(),
            self.forward.n_cols(),
            self.forward.nnz()
        )
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Sparse(SparseOperator, Var),
    Gather(Var, Arc<[usize]>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a `1 x c` row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Square(Var),
    SoftmaxRows(Var),
    Sum(Var),
    RowDot(Var, Var),
    ConcatCols(Var, Var),
    Mean(Vec<Var>),
    Custom(Arc<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | RowDot(a, b) | ConcatCols(a, b) => vec![*a, *b],
            Sparse(_, a) | Gather(a, _) | Scale(a, _) | Sigmoid(a) | LogSigmoid(a) | Log(a)
            | Exp(a) | Relu(a) | Square(a) | SoftmaxRows(a) | Sum(a) => vec![*a],
            Mean(vs) | Custom(_, vs) => vs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that depends on a
/// trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, taking ownership; `None` if `v` does not influence the loss.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            trainable: true,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            trainable: false,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn is_param(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    pub fn params(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].trainable)
            .map(Var)
            .collect()
    }

    fn eval(&self, op: &Op) -> Tensor {
        let v = |x: &Var| &self.nodes[x.0].value;
        match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => v(a).dot(v(b)),
            Op::MatMulT(a, b) => v(a).dot(&v(b).t()),
            Op::Sparse(s, a) => s.forward.mul_dense(v(a).view()),
            Op::Gather(a, idx) => v(a).select(Axis(0), idx),
            Op::Add(a, b) => v(a) + v(b),
            Op::Sub(a, b) => v(a) - v(b),
            Op::Mul(a, b) => v(a) * v(b),
            Op::AddRow(a, b) => v(a) + &v(b).row(0),
            Op::Scale(a, s) => v(a) * *s,
            Op::Sigmoid(a) => v(a).mapv(sigmoid),
            Op::LogSigmoid(a) => v(a).mapv(log_sigmoid),
            Op::Log(a) => v(a).mapv(f64::ln),
            Op::Exp(a) => v(a).mapv(f64::exp),
            Op::Relu(a) => v(a).mapv(|x| x.max(0.0)),
            Op::Square(a) => v(a).mapv(|x| x * x),
            Op::SoftmaxRows(a) => softmax_rows(v(a)),
            Op::Sum(a) => Array2::from_elem((1, 1), v(a).sum()),
            Op::RowDot(a, b) => (v(a) * v(b)).sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::ConcatCols(a, b) => {
                ndarray::concatenate(Axis(1), &[v(a).view(), v(b).view()]).expect("row counts")
            }
            Op::Mean(vs) => {
                let mut acc = v(&vs[0]).clone();
                for x in &vs[1..] {
                    acc += v(x);
                }
                acc / vs.len() as f64
            }
            Op::Custom(op, vs) => {
                let ins: Vec<&Tensor> = vs.iter().map(v).collect();
                op.forward(&ins)
            }
        }
    }

    fn record(&mut self, op: Op) -> Var {
        let value = self.eval(&op);
        self.push(op, value)
    }

    fn check_shapes(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "{what}: shape mismatch"
        );
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).ncols(), self.value(b).nrows(), "matmul");
        self.record(Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).ncols(), self.value(b).ncols(), "matmul_t");
        self.record(Op::MatMulT(a, b))
    }

    pub fn sparse_matmul(&mut self, s: &SparseOperator, x: Var) -> Var {
        assert_eq!(s.forward.n_cols(), self.value(x).nrows(), "sparse_matmul");
        self.record(Op::Sparse(s.clone(), x))
    }

    /// Rows `x[idx[0]], x[idx[1]], ...`.
    pub fn gather(&mut self, x: Var, idx: impl Into<Arc<[usize]>>) -> Var {
        let idx = idx.into();
        let n = self.value(x).nrows();
        assert!(idx.iter().all(|&i| i < n), "gather index out of range");
        self.record(Op::Gather(x, idx))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_shapes(a, b, "add");
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_shapes(a, b, "sub");
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_shapes(a, b, "mul");
        self.record(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row: bias must be 1 x c");
        assert_eq!(self.value(row).ncols(), self.value(x).ncols(), "add_row");
        self.record(Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.record(Op::Scale(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.record(Op::Sigmoid(x))
    }

    /// Numerically stable `log σ(x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.record(Op::LogSigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.record(Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.record(Op::Exp(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.record(Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.record(Op::Square(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        self.record(Op::SoftmaxRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.record(Op::Sum(x))
    }

    /// Sum of squares of every entry.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        self.sum(sq)
    }

    /// Row-wise inner products, `r x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        self.check_shapes(a, b, "row_dot");
        self.record(Op::RowDot(a, b))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).nrows(), self.value(b).nrows(), "concat_cols");
        self.record(Op::ConcatCols(a, b))
    }

    /// Entrywise mean of equally shaped nodes.
    pub fn mean(&mut self, vs: &[Var]) -> Var {
        assert!(!vs.is_empty(), "mean of nothing");
        for &x in &vs[1..] {
            self.check_shapes(vs[0], x, "mean");
        }
        self.record(Op::Mean(vs.to_vec()))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Var {
        self.record(Op::Custom(op, inputs.to_vec()))
    }

    /// Replaces the value of an input node. Call [`Tape::replay`] afterwards
    /// to refresh everything downstream.
    pub fn set_value(&mut self, leaf: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[leaf.0];
        if !matches!(node.op, Op::Leaf) {
            return input("set_value: node is not an input");
        }
        if node.value.dim() != value.dim() {
            return input(format!(
                "set_value: shape {:?} does not match {:?}",
                value.dim(),
                node.value.dim()
            ));
        }
        node.value = value;
        Ok(())
    }

    /// Re-runs every recorded operation in order.
    pub fn replay(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.nodes[i].value = self.eval(&op);
        }
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.dim() != (1, 1) {
            return input(format!(
                "loss node has shape {:?}, expected a scalar",
                root.value.dim()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => *acc += &contribution,
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let v = |x: &Var| &self.nodes[x.0].value;
        let needs = |x: &Var| self.nodes[x.0].requires_grad;
        let y = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::new();
                if needs(a) {
                    out.push((*a, g.dot(&v(b).t())));
                }
                if needs(b) {
                    out.push((*b, v(a).t().dot(g)));
                }
                out
            }
            Op::MatMulT(a, b) => {
                let mut out = Vec::new();
                if needs(a) {
                    out.push((*a, g.dot(v(b))));
                }
                if needs(b) {
                    out.push((*b, g.t().dot(v(a))));
                }
                out
            }
            Op::Sparse(s, a) => vec![(*a, s.transposed.mul_dense(g.view()))],
            Op::Gather(a, idx) => {
                let mut dx = Array2::zeros(v(a).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(src);
                    row += &g.row(r);
                }
                vec![(*a, dx)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, -g)],
            Op::Mul(a, b) => vec![(*a, g * v(b)), (*b, g * v(a))],
            Op::AddRow(a, b) => vec![(*a, g.clone()), (*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)))],
            Op::Scale(a, s) => vec![(*a, g * *s)],
            Op::Sigmoid(a) => {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(y).for_each(|d, &s| *d *= s * (1.0 - s));
                vec![(*a, dx)]
            }
            Op::LogSigmoid(a) => {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(v(a)).for_each(|d, &x| *d *= sigmoid(-x));
                vec![(*a, dx)]
            }
            Op::Log(a) => vec![(*a, g / v(a))],
            Op::Exp(a) => vec![(*a, g * y)],
            Op::Relu(a) => {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(v(a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                vec![(*a, dx)]
            }
            Op::Square(a) => vec![(*a, g * v(a) * 2.0)],
            Op::SoftmaxRows(a) => {
                let gy = g * y;
                let dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![(*a, gy - &(y * &dots))]
            }
            Op::Sum(a) => vec![(*a, Array2::from_elem(v(a).dim(), g[[0, 0]]))],
            Op::RowDot(a, b) => vec![(*a, v(b) * g), (*b, v(a) * g)],
            Op::ConcatCols(a, b) => {
                let split = v(a).ncols();
                vec![
                    (*a, g.slice(ndarray::s![.., ..split]).to_owned()),
                    (*b, g.slice(ndarray::s![.., split..]).to_owned()),
                ]
            }
            Op::Mean(vs) => {
                let share = g / vs.len() as f64;
                vs.iter().map(|x| (*x, share.clone())).collect()
            }
            Op::Custom(op, vs) => {
                let ins: Vec<&Tensor> = vs.iter().map(v).collect();
                vs.iter()
                    .zip(op.backward(&ins, y, g))
                    .filter_map(|(x, d)| d.map(|d| (*x, d)))
                    .collect()
            }
        }
    }
}

/// Forward value of a scalar node and the gradients of it.
pub fn value_and_grad(tape: &Tape, loss: Var) -> Result<(f64, Gradients)> {
    let grads = tape.backward(loss)?;
    Ok((tape.scalar_value(loss), grads))
}

/// Largest relative error between the tape gradient of `loss` with respect to
/// `leaf` and central finite differences with step `eps`.
///
/// The relative error of one coordinate is `|a - n| / max(|a|, |n|, 1e-6)`.
/// The tape is replayed for each perturbation and restored afterwards.
pub fn grad_check(tape: &mut Tape, loss: Var, leaf: Var, eps: f64) -> Result<f64> {
    if eps <= 0.0 || !eps.is_finite() {
        return input(format!("grad_check: step {eps} must be positive"));
    }
    let grads = tape.backward(loss)?;
    let original = tape.value(leaf).clone();
    let analytic = grads
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Array2::zeros(original.dim()));
    let mut worst: f64 = 0.0;
    for (idx, &x) in original.indexed_iter() {
        let mut probe = original.clone();
        probe[idx] = x + eps;
        tape.set_value(leaf, probe.clone())?;
        tape.replay();
        let up = tape.scalar_value(loss);
        probe[idx] = x - eps;
        tape.set_value(leaf, probe)?;
        tape.replay();
        let down = tape.scalar_value(loss);
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[idx];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    tape.set_value(leaf, original)?;
    tape.replay();
    Ok(worst)
}

/// [`grad_check`] over every trainable leaf; returns the worst error.
pub fn grad_check_all(tape: &mut Tape, loss: Var, eps: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for leaf in tape.params() {
        worst = worst.max(grad_check(tape, loss, leaf, eps)?);
    }
    Ok(worst)
}
