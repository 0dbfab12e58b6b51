//! Define-by-run expression graph.
//!
//! Every primitive is evaluated eagerly when it is recorded, and its value is
//! kept on the node. [`Graph::grad`] walks the graph in reverse and records the
//! vector-Jacobian products as *new nodes on the same graph*, so a gradient is
//! itself an ordinary differentiable expression. Differentiating a function
//! whose body already contains a `grad` call therefore yields exact
//! second-order terms (Hessian-vector products, meta-gradients through
//! gradient steps).

use std::sync::Arc;

use crate::tensor::Tensor;
use crate::AutodiffError;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize, f64),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Clamp(usize, f64, f64),
    // Zero-gradient helpers. Each is a pure function of its parent so replay
    // stays valid.
    StepMask(usize),
    RangeMask(usize, f64, f64),
    ArgmaxMask(usize),
    StopGrad(usize),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    MatMulTn(usize, usize),
    Sum(usize),
    Max(usize),
    Fill(usize, usize, usize),
    SumRows(usize),
    RepeatRows(usize, usize),
    SumCols(usize),
    RepeatCols(usize, usize),
    LogSumExpRows(usize),
    PickCols(usize, Arc<[usize]>),
    ScatterCols(usize, Arc<[usize]>, usize),
    Slice(usize, usize, usize, usize),
    Embed(usize, usize, usize, usize),
    Reshape(usize, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Clamp(..) => "clamp",
            Op::StepMask(..) => "step_mask",
            Op::RangeMask(..) => "range_mask",
            Op::ArgmaxMask(..) => "argmax_mask",
            Op::StopGrad(..) => "stop_grad",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::MatMulTn(..) => "matmul_tn",
            Op::Sum(..) => "sum",
            Op::Max(..) => "max",
            Op::Fill(..) => "fill",
            Op::SumRows(..) => "sum_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::SumCols(..) => "sum_cols",
            Op::RepeatCols(..) => "repeat_cols",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::PickCols(..) => "pick_cols",
            Op::ScatterCols(..) => "scatter_cols",
            Op::Slice(..) => "slice",
            Op::Embed(..) => "embed",
            Op::Reshape(..) => "reshape",
        }
    }

    /// Parents through which gradient flows.
    fn grad_parents(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf
            | Op::Const
            | Op::StepMask(_)
            | Op::RangeMask(..)
            | Op::ArgmaxMask(_)
            | Op::StopGrad(_) => [None, None],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::MatMulTn(a, b) => [Some(a), Some(b)],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Max(a)
            | Op::Fill(a, ..)
            | Op::SumRows(a)
            | Op::RepeatRows(a, _)
            | Op::SumCols(a)
            | Op::RepeatCols(a, _)
            | Op::LogSumExpRows(a)
            | Op::PickCols(a, _)
            | Op::ScatterCols(a, ..)
            | Op::Slice(a, ..)
            | Op::Embed(a, ..)
            | Op::Reshape(a, ..) => [Some(a), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A recorded computation over dense `f64` tensors.
///
/// Nodes are appended in evaluation order, so every node's parents precede it
/// and the graph is acyclic by construction.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: Option<(usize, &'static str)>,
}

fn eval(op: &Op, nodes: &[Node]) -> Tensor {
    let v = |i: usize| &nodes[i].value;
    match op {
        Op::Leaf | Op::Const => unreachable!("inputs are not evaluated"),
        Op::Add(a, b) => v(*a).zip_map(v(*b), |x, y| x + y),
        Op::Sub(a, b) => v(*a).zip_map(v(*b), |x, y| x - y),
        Op::Mul(a, b) => v(*a).zip_map(v(*b), |x, y| x * y),
        Op::Div(a, b) => v(*a).zip_map(v(*b), |x, y| x / y),
        Op::Neg(a) => v(*a).map(|x| -x),
        Op::Scale(a, k) => v(*a).map(|x| k * x),
        Op::Offset(a, k) => v(*a).map(|x| x + k),
        Op::Exp(a) => v(*a).map(f64::exp),
        Op::Log(a) => v(*a).map(f64::ln),
        Op::Tanh(a) => v(*a).map(f64::tanh),
        // ReLU'(0) := 0, see StepMask.
        Op::Relu(a) => v(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Clamp(a, lo, hi) => v(*a).map(|x| x.clamp(*lo, *hi)),
        Op::StepMask(a) => v(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::RangeMask(a, lo, hi) => v(*a).map(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 }),
        Op::ArgmaxMask(a) => {
            let t = v(*a);
            let mut out = Tensor::zeros(t.rows(), t.cols());
            if !t.is_empty() {
                out.data_mut()[t.argmax()] = 1.0;
            }
            out
        }
        Op::StopGrad(a) => v(*a).clone(),
        Op::MatMul(a, b) => v(*a).matmul(v(*b)),
        Op::MatMulNt(a, b) => v(*a).matmul_nt(v(*b)),
        Op::MatMulTn(a, b) => v(*a).matmul_tn(v(*b)),
        Op::Sum(a) => Tensor::scalar(v(*a).sum()),
        Op::Max(a) => {
            let t = v(*a);
            Tensor::scalar(t.data()[t.argmax()])
        }
        Op::Fill(a, r, c) => Tensor::filled(*r, *c, v(*a).item()),
        Op::SumRows(a) => v(*a).sum_rows(),
        Op::RepeatRows(a, n) => v(*a).repeat_rows(*n),
        Op::SumCols(a) => v(*a).sum_cols(),
        Op::RepeatCols(a, m) => v(*a).repeat_cols(*m),
        Op::LogSumExpRows(a) => v(*a).logsumexp_rows(),
        Op::PickCols(a, idx) => {
            let t = v(*a);
            Tensor::new(
                t.rows(),
                1,
                idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect(),
            )
        }
        Op::ScatterCols(a, idx, m) => {
            let t = v(*a);
            let mut out = Tensor::zeros(t.rows(), *m);
            for (r, &c) in idx.iter().enumerate() {
                out.data_mut()[r * m + c] = t.get(r, 0);
            }
            out
        }
        Op::Slice(a, off, r, c) => Tensor::new(*r, *c, v(*a).data()[*off..off + r * c].to_vec()),
        Op::Embed(a, off, r, c) => {
            let t = v(*a);
            let mut out = Tensor::zeros(*r, *c);
            out.data_mut()[*off..off + t.len()].copy_from_slice(t.data());
            out
        }
        Op::Reshape(a, r, c) => v(*a).reshape(*r, *c),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node { op, value });
        Var(id)
    }

    fn record(&mut self, op: Op) -> Var {
        let value = eval(&op, &self.nodes);
        self.push(op, value)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// First node whose value contained a NaN or infinity.
    pub fn check_finite(&self) -> Result<(), AutodiffError> {
        match self.non_finite {
            None => Ok(()),
            Some((node, op)) => Err(AutodiffError::NonFinite { node, op }),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.record(Op::Neg(a.0))
    }

    /// `k · a` for a constant `k`.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.record(Op::Scale(a.0, k))
    }

    /// `a + k` for a constant `k`.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.record(Op::Offset(a.0, k))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.record(Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.record(Op::Log(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.record(Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record(Op::Relu(a.0))
    }

    /// Elementwise clamp; gradient passes only where `lo ≤ a ≤ hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.record(Op::Clamp(a.0, lo, hi))
    }

    /// Same value as `a`, but treated as a constant by [`Graph::grad`].
    pub fn stop_grad(&mut self, a: Var) -> Var {
        self.record(Op::StopGrad(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::MatMul(a.0, b.0))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::MatMulNt(a.0, b.0))
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::MatMulTn(a.0, b.0))
    }

    /// Sum of all entries (`1 × 1`).
    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Largest entry (`1 × 1`). Ties resolve to the first maximal entry.
    pub fn max(&mut self, a: Var) -> Var {
        self.record(Op::Max(a.0))
    }

    /// Broadcast a scalar to `rows × cols`.
    pub fn fill(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.shape(a), (1, 1), "fill expects a scalar");
        self.record(Op::Fill(a.0, rows, cols))
    }

    /// `Σ_i a[i, ·]` as a row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.record(Op::SumRows(a.0))
    }

    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        self.record(Op::RepeatRows(a.0, n))
    }

    /// `Σ_j a[·, j]` as a column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        self.record(Op::SumCols(a.0))
    }

    pub fn repeat_cols(&mut self, a: Var, m: usize) -> Var {
        self.record(Op::RepeatCols(a.0, m))
    }

    /// Adds a `1 × m` row to every row of an `n × m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let n = self.shape(a).0;
        let b = self.repeat_rows(row, n);
        self.add(a, b)
    }

    /// Row-wise log-sum-exp (`n × 1`).
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        self.record(Op::LogSumExpRows(a.0))
    }

    /// `out[r] = a[r, idx[r]]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(rows, idx.len(), "pick_cols needs one index per row");
        assert!(
            idx.iter().all(|&c| c < cols),
            "pick_cols index out of range"
        );
        self.record(Op::PickCols(a.0, idx.into()))
    }

    /// View of `rows × cols` consecutive entries of `a` starting at `offset`.
    pub fn slice(&mut self, a: Var, offset: usize, rows: usize, cols: usize) -> Var {
        assert!(
            offset + rows * cols <= self.nodes[a.0].value.len(),
            "slice out of range"
        );
        self.record(Op::Slice(a.0, offset, rows, cols))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(
            rows * cols,
            self.nodes[a.0].value.len(),
            "reshape size mismatch"
        );
        self.record(Op::Reshape(a.0, rows, cols))
    }

    /// `Σ a ⊙ b` for equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Gradients of the scalar `y` with respect to each node in `wrt`.
    ///
    /// The backward pass is recorded on this graph: the returned handles are
    /// ordinary nodes and can be differentiated again. Nodes in `wrt` may be
    /// intermediate; the result is then the partial derivative holding that
    /// node's own inputs fixed.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Result<Vec<Var>, AutodiffError> {
        let shape = self.shape(y);
        if shape != (1, 1) {
            return Err(AutodiffError::NotScalar { shape });
        }
        self.check_finite()?;
        let Some(lo) = wrt.iter().map(|v| v.0).min() else {
            return Ok(Vec::new());
        };
        if lo > y.0 {
            return Ok(wrt.iter().map(|&w| self.zeros_like(w)).collect());
        }

        // reach[i - lo]: node i depends on some node in `wrt`.
        let span = y.0 + 1 - lo;
        let mut reach = vec![false; span];
        for w in wrt {
            if w.0 <= y.0 {
                reach[w.0 - lo] = true;
            }
        }
        for i in lo..=y.0 {
            if reach[i - lo] {
                continue;
            }
            reach[i - lo] = self.nodes[i]
                .op
                .grad_parents()
                .iter()
                .flatten()
                .any(|&p| p >= lo && reach[p - lo]);
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; span];
        if reach[y.0 - lo] {
            adjoint[y.0 - lo] = Some(self.scalar(1.0));
        }
        for i in (lo..=y.0).rev() {
            let Some(g) = adjoint[i - lo] else { continue };
            let need = |p: usize| p >= lo && reach[p - lo];
            for (parent, contrib) in self.vjp(i, g, need) {
                if !need(parent) {
                    continue;
                }
                let slot = &mut adjoint[parent - lo];
                *slot = Some(match *slot {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib),
                });
            }
        }

        let out = wrt
            .iter()
            .map(
                |&w| match (w.0 <= y.0).then(|| adjoint[w.0 - lo]).flatten() {
                    Some(g) => g,
                    None => self.zeros_like(w),
                },
            )
            .collect();
        self.check_finite()?;
        Ok(out)
    }

    fn zeros_like(&mut self, v: Var) -> Var {
        let (r, c) = self.shape(v);
        self.constant(Tensor::zeros(r, c))
    }

    /// Vector-Jacobian products of node `i` for adjoint `g`, restricted to
    /// parents accepted by `need`.
    fn vjp(&mut self, i: usize, g: Var, need: impl Fn(usize) -> bool) -> Vec<(usize, Var)> {
        let op = self.nodes[i].op.clone();
        let out = Var(i);
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf
            | Op::Const
            | Op::StepMask(_)
            | Op::RangeMask(..)
            | Op::ArgmaxMask(_)
            | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                if need(a) {
                    res.push((a, g));
                }
                if need(b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    res.push((a, g));
                }
                if need(b) {
                    res.push((b, self.neg(g)));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    res.push((a, self.mul(g, Var(b))));
                }
                if need(b) {
                    res.push((b, self.mul(g, Var(a))));
                }
            }
            Op::Div(a, b) => {
                if need(a) {
                    res.push((a, self.div(g, Var(b))));
                }
                if need(b) {
                    let q = self.div(out, Var(b));
                    let t = self.mul(g, q);
                    res.push((b, self.neg(t)));
                }
            }
            Op::Neg(a) => res.push((a, self.neg(g))),
            Op::Scale(a, k) => res.push((a, self.scale(g, k))),
            Op::Offset(a, _) => res.push((a, g)),
            Op::Exp(a) => res.push((a, self.mul(g, out))),
            Op::Log(a) => res.push((a, self.div(g, Var(a)))),
            Op::Tanh(a) => {
                let sq = self.mul(out, out);
                let one_minus = self.neg(sq);
                let d = self.offset(one_minus, 1.0);
                res.push((a, self.mul(g, d)));
            }
            Op::Relu(a) => {
                let m = self.record(Op::StepMask(a));
                res.push((a, self.mul(g, m)));
            }
            Op::Clamp(a, lo, hi) => {
                let m = self.record(Op::RangeMask(a, lo, hi));
                res.push((a, self.mul(g, m)));
            }
            Op::MatMul(a, b) => {
                if need(a) {
                    res.push((a, self.matmul_nt(g, Var(b))));
                }
                if need(b) {
                    res.push((b, self.matmul_tn(Var(a), g)));
                }
            }
            Op::MatMulNt(a, b) => {
                if need(a) {
                    res.push((a, self.matmul(g, Var(b))));
                }
                if need(b) {
                    res.push((b, self.matmul_tn(g, Var(a))));
                }
            }
            Op::MatMulTn(a, b) => {
                if need(a) {
                    res.push((a, self.matmul_nt(Var(b), g)));
                }
                if need(b) {
                    res.push((b, self.matmul(Var(a), g)));
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(Var(a));
                res.push((a, self.fill(g, r, c)));
            }
            Op::Max(a) => {
                let (r, c) = self.shape(Var(a));
                let m = self.record(Op::ArgmaxMask(a));
                let gf = self.fill(g, r, c);
                res.push((a, self.mul(gf, m)));
            }
            Op::Fill(a, ..) => res.push((a, self.sum(g))),
            Op::SumRows(a) => {
                let n = self.shape(Var(a)).0;
                res.push((a, self.repeat_rows(g, n)));
            }
            Op::RepeatRows(a, _) => res.push((a, self.sum_rows(g))),
            Op::SumCols(a) => {
                let m = self.shape(Var(a)).1;
                res.push((a, self.repeat_cols(g, m)));
            }
            Op::RepeatCols(a, _) => res.push((a, self.sum_cols(g))),
            Op::LogSumExpRows(a) => {
                let m = self.shape(Var(a)).1;
                let lse = self.repeat_cols(out, m);
                let shifted = self.sub(Var(a), lse);
                let softmax = self.exp(shifted);
                let gm = self.repeat_cols(g, m);
                res.push((a, self.mul(gm, softmax)));
            }
            Op::PickCols(a, idx) => {
                let m = self.shape(Var(a)).1;
                res.push((a, self.record(Op::ScatterCols(g.0, idx, m))));
            }
            Op::ScatterCols(a, idx, _) => {
                res.push((a, self.record(Op::PickCols(g.0, idx))));
            }
            Op::Slice(a, off, ..) => {
                let (r, c) = self.shape(Var(a));
                res.push((a, self.record(Op::Embed(g.0, off, r, c))));
            }
            Op::Embed(a, off, ..) => {
                let (r, c) = self.shape(Var(a));
                res.push((a, self.slice(g, off, r, c)));
            }
            Op::Reshape(a, ..) => {
                let (r, c) = self.shape(Var(a));
                res.push((a, self.reshape(g, r, c)));
            }
        }
        res
    }

    /// Replaces the value of an input node. Call [`Graph::recompute`] afterwards.
    pub fn set_input(&mut self, v: Var, value: Tensor) {
        let node = &mut self.nodes[v.0];
        assert!(
            matches!(node.op, Op::Leaf | Op::Const),
            "set_input on a computed node"
        );
        assert_eq!(
            node.value.shape(),
            value.shape(),
            "set_input shape mismatch"
        );
        node.value = value;
    }

    /// Re-evaluates every computed node from the current input values.
    pub fn recompute(&mut self) {
        self.non_finite = None;
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Const) {
                if self.non_finite.is_none() && !self.nodes[i].value.is_finite() {
                    self.non_finite = Some((i, self.nodes[i].op.name()));
                }
                continue;
            }
            let value = eval(&self.nodes[i].op, &self.nodes);
            if self.non_finite.is_none() && !value.is_finite() {
                self.non_finite = Some((i, self.nodes[i].op.name()));
            }
            self.nodes[i].value = value;
        }
    }
}
