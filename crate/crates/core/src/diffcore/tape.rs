//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every node holds its forward value. [`Tape::grad`] appends the backward
//! pass to the same tape as ordinary nodes, so the gradients it returns are
//! themselves differentiable. Calling `grad` on a function of gradients gives
//! second-order quantities such as the gradient of a squared gradient norm.

use std::rc::Rc;

use super::tensor::Tensor;
use super::DiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    /// `a^T * b`
    TMatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `n x c` plus a broadcast `1 x c` row.
    AddRow(Var, Var),
    Relu(Var),
    Exp(Var),
    LogSoftmax(Var),
    RowSum(Var),
    BroadcastCols(Var),
    ColSum(Var),
    BroadcastRows(Var),
    SumAll(Var),
    BroadcastScalar(Var),
    Pick(Var, Rc<[usize]>),
    Scatter(Var, Rc<[usize]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::TMatMul(..) => "t_matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::LogSoftmax(..) => "log_softmax",
            Op::RowSum(..) => "row_sum",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::ColSum(..) => "col_sum",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumAll(..) => "sum_all",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::Pick(..) => "pick",
            Op::Scatter(..) => "scatter",
        }
    }

    fn inputs(&self) -> (Option<Var>, Option<Var>) {
        match *self {
            Op::Leaf | Op::Const => (None, None),
            Op::MatMul(a, b)
            | Op::TMatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => (Some(a), Some(b)),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::LogSoftmax(a)
            | Op::RowSum(a)
            | Op::BroadcastCols(a)
            | Op::ColSum(a)
            | Op::BroadcastRows(a)
            | Op::SumAll(a)
            | Op::BroadcastScalar(a)
            | Op::Pick(a, _)
            | Op::Scatter(a, _) => (Some(a), None),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Records operations in evaluation order. Inputs of a node always precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(usize, &'static str)>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// First node whose value contained a non-finite entry, if any.
    pub fn check(&self) -> Result<(), DiffError> {
        match self.fault {
            None => Ok(()),
            Some((node, op)) => Err(DiffError::NonFinite { node, op }),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let idx = self.nodes.len();
        if self.fault.is_none() && !value.all_finite() {
            self.fault = Some((idx, op.name()));
        }
        self.nodes.push(Node { op, value });
        Var(idx)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn t_matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).t_matmul(self.value(b));
        self.push(Op::TMatMul(a, b), v)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(Op::MatMulT(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), v)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1, "add_row expects a 1 x c row");
        assert_eq!(ta.cols(), tr.cols(), "add_row column mismatch");
        let mut v = ta.clone();
        let cols = ta.cols();
        for chunk in v.data_mut().chunks_mut(cols) {
            for (x, b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, row), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).log_softmax_rows();
        self.push(Op::LogSoftmax(a), v)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).row_sums();
        self.push(Op::RowSum(a), v)
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.cols(), 1, "broadcast_cols expects a column");
        let mut data = Vec::with_capacity(t.rows() * cols);
        for &x in t.data() {
            data.extend(std::iter::repeat_n(x, cols));
        }
        let v = Tensor::from_vec(t.rows(), cols, data);
        self.push(Op::BroadcastCols(a), v)
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).col_sums();
        self.push(Op::ColSum(a), v)
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), 1, "broadcast_rows expects a row");
        let mut data = Vec::with_capacity(rows * t.cols());
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(rows, t.cols(), data);
        self.push(Op::BroadcastRows(a), v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Tensor::full(rows, cols, self.value(a).item());
        self.push(Op::BroadcastScalar(a), v)
    }

    /// Gathers `a[i, labels[i]]` into an `n x 1` column.
    pub fn pick(&mut self, a: Var, labels: Rc<[usize]>) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), labels.len(), "pick label count mismatch");
        let data = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| t.get(i, l))
            .collect();
        let v = Tensor::from_vec(t.rows(), 1, data);
        self.push(Op::Pick(a, labels), v)
    }

    /// Inverse of [`Tape::pick`]: places `a[i]` at column `labels[i]`, zeros elsewhere.
    pub fn scatter(&mut self, a: Var, labels: Rc<[usize]>, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.cols(), 1, "scatter expects a column");
        let mut v = Tensor::zeros(t.rows(), cols);
        for (i, &l) in labels.iter().enumerate() {
            v.set(i, l, t.get(i, 0));
        }
        self.push(Op::Scatter(a, labels), v)
    }

    /// Mean of all entries as a `1 x 1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of squared entries as a `1 x 1` node.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum_all(sq)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The backward pass is recorded on this tape, so the returned nodes can
    /// be differentiated again. Inputs not connected to `output` get zeros.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "grad expects a scalar output"
        );
        let end = output.0;
        let mut needed = vec![false; end + 1];
        for w in wrt {
            if w.0 <= end {
                needed[w.0] = true;
            }
        }
        for i in 0..=end {
            if needed[i] {
                continue;
            }
            let (a, b) = self.nodes[i].op.inputs();
            needed[i] = a.is_some_and(|v| needed[v.0]) || b.is_some_and(|v| needed[v.0]);
        }

        let mut grads: Vec<Option<Var>> = vec![None; end + 1];
        if needed[end] {
            grads[end] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for i in (0..=end).rev() {
            let Some(g) = grads[i] else { continue };
            if !needed[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in Self::vjp(&op, Var(i), g) {
                if !needed[input.0] {
                    continue;
                }
                let contrib = contrib(self);
                grads[input.0] = Some(match grads[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib),
                });
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.value(*w).shape();
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of one node, as lazily built tape closures.
    #[allow(clippy::type_complexity)]
    fn vjp(op: &Op, out: Var, g: Var) -> Vec<(Var, Box<dyn FnOnce(&mut Tape) -> Var>)> {
        match op.clone() {
            Op::Leaf | Op::Const => vec![],
            Op::MatMul(a, b) => vec![
                (a, Box::new(move |t: &mut Tape| t.matmul_t(g, b))),
                (b, Box::new(move |t: &mut Tape| t.t_matmul(a, g))),
            ],
            Op::TMatMul(a, b) => vec![
                (a, Box::new(move |t: &mut Tape| t.matmul_t(b, g))),
                (b, Box::new(move |t: &mut Tape| t.matmul(a, g))),
            ],
            Op::MatMulT(a, b) => vec![
                (a, Box::new(move |t: &mut Tape| t.matmul(g, b))),
                (b, Box::new(move |t: &mut Tape| t.t_matmul(g, a))),
            ],
            Op::Add(a, b) => vec![(a, Box::new(move |_| g)), (b, Box::new(move |_| g))],
            Op::Sub(a, b) => vec![
                (a, Box::new(move |_| g)),
                (b, Box::new(move |t: &mut Tape| t.scale(g, -1.0))),
            ],
            Op::Mul(a, b) => vec![
                (a, Box::new(move |t: &mut Tape| t.mul(g, b))),
                (b, Box::new(move |t: &mut Tape| t.mul(g, a))),
            ],
            Op::Scale(a, s) => vec![(a, Box::new(move |t: &mut Tape| t.scale(g, s)))],
            Op::AddRow(a, row) => vec![
                (a, Box::new(move |_| g)),
                (row, Box::new(move |t: &mut Tape| t.col_sum(g))),
            ],
            Op::Relu(a) => vec![(
                a,
                Box::new(move |t: &mut Tape| {
                    // The derivative of relu is piecewise constant.
                    let mask = t.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let m = t.constant(mask);
                    t.mul(g, m)
                }),
            )],
            Op::Exp(a) => vec![(a, Box::new(move |t: &mut Tape| t.mul(g, out)))],
            Op::LogSoftmax(a) => vec![(
                a,
                Box::new(move |t: &mut Tape| {
                    let cols = t.value(out).cols();
                    let probs = t.exp(out);
                    let gs = t.row_sum(g);
                    let gb = t.broadcast_cols(gs, cols);
                    let pg = t.mul(probs, gb);
                    t.sub(g, pg)
                }),
            )],
            Op::RowSum(a) => vec![(
                a,
                Box::new(move |t: &mut Tape| {
                    let cols = t.value(a).cols();
                    t.broadcast_cols(g, cols)
                }),
            )],
            Op::BroadcastCols(a) => vec![(a, Box::new(move |t: &mut Tape| t.row_sum(g)))],
            Op::ColSum(a) => vec![(
                a,
                Box::new(move |t: &mut Tape| {
                    let rows = t.value(a).rows();
                    t.broadcast_rows(g, rows)
                }),
            )],
            Op::BroadcastRows(a) => vec![(a, Box::new(move |t: &mut Tape| t.col_sum(g)))],
            Op::SumAll(a) => vec![(
                a,
                Box::new(move |t: &mut Tape| {
                    let (r, c) = t.value(a).shape();
                    t.broadcast_scalar(g, r, c)
                }),
            )],
            Op::BroadcastScalar(a) => vec![(a, Box::new(move |t: &mut Tape| t.sum_all(g)))],
            Op::Pick(a, labels) => vec![(
                a,
                Box::new(move |t: &mut Tape| {
                    let cols = t.value(a).cols();
                    t.scatter(g, labels, cols)
                }),
            )],
            Op::Scatter(a, labels) => vec![(a, Box::new(move |t: &mut Tape| t.pick(g, labels)))],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_leaf(t: &mut Tape, x: f64) -> Var {
        t.leaf(Tensor::scalar(x))
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = scalar_leaf(&mut t, 3.0);
        let y = t.mul(x, x);
        let g = t.grad(y, &[x]);
        assert_eq!(t.scalar(g[0]), 6.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        // y = x^3, dy/dx = 3x^2, d2y/dx2 = 6x
        let mut t = Tape::new();
        let x = scalar_leaf(&mut t, 2.0);
        let x2 = t.mul(x, x);
        let y = t.mul(x2, x);
        let g = t.grad(y, &[x])[0];
        assert_eq!(t.scalar(g), 12.0);
        let h = t.grad(g, &[x])[0];
        assert_eq!(t.scalar(h), 12.0);
    }

    #[test]
    fn disconnected_input_gets_zero() {
        let mut t = Tape::new();
        let x = scalar_leaf(&mut t, 1.0);
        let w = t.leaf(Tensor::zeros(2, 3));
        let y = t.mul(x, x);
        let g = t.grad(y, &[w]);
        assert_eq!(t.value(g[0]), &Tensor::zeros(2, 3));
    }

    #[test]
    fn non_finite_is_reported_with_op() {
        let mut t = Tape::new();
        let x = scalar_leaf(&mut t, 800.0);
        let _ = t.exp(x);
        match t.check() {
            Err(DiffError::NonFinite { op, .. }) => assert_eq!(op, "exp"),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn pick_and_scatter_are_adjoint() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let labels: Rc<[usize]> = Rc::from(vec![1, 0]);
        let p = t.pick(a, labels);
        assert_eq!(t.value(p).data(), &[2.0, 3.0]);
        let s = t.sum_all(p);
        let g = t.grad(s, &[a])[0];
        assert_eq!(t.value(g).data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
