use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::{DiffError, SparseMatrix, Tensor};

/// Recorded computation: an append-only, topologically ordered list of
/// primitive operations over tensors.
///
/// Every operation evaluates eagerly and records enough structure for
/// reverse-mode differentiation. The backward pass can either produce plain
/// tensors ([`Node::grad_values`]) or emit its own recorded operations
/// ([`Node::grad_nodes`]), in which case the produced gradients are
/// themselves differentiable — this is what lets a loss defined on gradients
/// be optimized.
///
/// A tape is confined to one execution context; independent tapes may run in
/// parallel.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a recorded tensor on a [`Tape`].
#[derive(Clone)]
pub struct Node {
    tape: Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

struct TapeInner {
    nodes: Vec<NodeData>,
}

struct NodeData {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Spmm {
        st: Rc<SparseMatrix>,
        b: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Elu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Transpose(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    SliceCols {
        a: usize,
        start: usize,
        end: usize,
    },
    Sum(usize),
    SumOverRows(usize),
    SumOverCols(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    GatherRows {
        a: usize,
        idx: Rc<Vec<usize>>,
    },
    ScatterAddRows {
        a: usize,
        idx: Rc<Vec<usize>>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b) => vec![*a, *b],
            Op::Spmm { b, .. } => vec![*b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Elu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::SumOverRows(a)
            | Op::SumOverCols(a)
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a)
            | Op::SliceCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::ScatterAddRows { a, .. } => vec![*a],
            Op::ConcatCols(v) => v.clone(),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor as a differentiable leaf (parameter or input).
    pub fn leaf(&self, value: Tensor) -> Node {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a tensor as a non-differentiable constant.
    pub fn constant(&self, value: Tensor) -> Node {
        self.push(value, Op::Leaf, false)
    }

    /// Sparse-dense product `s × b`, recorded for differentiation w.r.t. `b`.
    pub fn spmm(&self, s: &Rc<SparseMatrix>, b: &Node) -> Result<Node, DiffError> {
        self.check_owns(b)?;
        let value = s.mul_dense(&b.value_ref())?;
        let st = s.transpose_shared();
        Ok(self.push(value, Op::Spmm { st, b: b.id }, b.requires_grad()))
    }

    /// Column-wise concatenation of equally tall nodes.
    pub fn concat_cols(&self, parts: &[&Node]) -> Result<Node, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Shape("concat_cols of zero tensors".into()));
        }
        let rows = parts[0].rows;
        let mut cols = 0;
        for p in parts {
            self.check_owns(p)?;
            if p.rows != rows {
                return Err(DiffError::Shape(format!(
                    "concat_cols: {}x{} vs {}x{}",
                    rows, parts[0].cols, p.rows, p.cols
                )));
            }
            cols += p.cols;
        }
        let mut data = vec![0.0; rows * cols];
        let inner = self.inner.borrow();
        let mut offset = 0;
        for p in parts {
            let v = &inner.nodes[p.id].value;
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + p.cols].copy_from_slice(v.row(r));
            }
            offset += p.cols;
        }
        drop(inner);
        let value = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Node {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let (rows, cols) = value.shape();
        inner.nodes.push(NodeData {
            value,
            op,
            requires_grad,
        });
        Node {
            tape: self.clone(),
            id,
            rows,
            cols,
        }
    }

    fn check_owns(&self, n: &Node) -> Result<(), DiffError> {
        if !Rc::ptr_eq(&self.inner, &n.tape.inner) {
            return Err(DiffError::Graph("node belongs to a different record".into()));
        }
        Ok(())
    }
}

impl Node {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Copy of the node's current value.
    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    fn value_ref(&self) -> Ref<'_, Tensor> {
        Ref::map(self.tape.inner.borrow(), |inner| &inner.nodes[self.id].value)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn unary(&self, value: Tensor, op: Op) -> Node {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Node, value: Tensor, op: Op) -> Result<Node, DiffError> {
        self.tape.check_owns(other)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    pub fn matmul(&self, other: &Node) -> Result<Node, DiffError> {
        let value = self.value_ref().matmul(&other.value_ref())?;
        self.binary(other, value, Op::Matmul(self.id, other.id))
    }

    pub fn add(&self, other: &Node) -> Result<Node, DiffError> {
        let value = self.value_ref().zip(&other.value_ref(), |a, b| a + b)?;
        self.binary(other, value, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Node) -> Result<Node, DiffError> {
        let value = self.value_ref().zip(&other.value_ref(), |a, b| a - b)?;
        self.binary(other, value, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Node) -> Result<Node, DiffError> {
        let value = self.value_ref().zip(&other.value_ref(), |a, b| a * b)?;
        self.binary(other, value, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Node) -> Result<Node, DiffError> {
        let value = self.value_ref().zip(&other.value_ref(), |a, b| a / b)?;
        self.binary(other, value, Op::Div(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Node {
        let value = self.value_ref().scaled(c);
        self.unary(value, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Node {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Node {
        let value = self.value_ref().map(|v| v + c);
        self.unary(value, Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Node {
        let value = self.value_ref().map(|v| v.max(0.0));
        self.unary(value, Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Node {
        let value = self.value_ref().map(|v| if v > 0.0 { v } else { slope * v });
        self.unary(value, Op::LeakyRelu(self.id, slope))
    }

    pub fn elu(&self) -> Node {
        let value = self.value_ref().map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.unary(value, Op::Elu(self.id))
    }

    pub fn exp(&self) -> Node {
        let value = self.value_ref().map(f64::exp);
        self.unary(value, Op::Exp(self.id))
    }

    pub fn log(&self) -> Node {
        let value = self.value_ref().map(f64::ln);
        self.unary(value, Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Node {
        let value = self.value_ref().map(f64::sqrt);
        self.unary(value, Op::Sqrt(self.id))
    }

    pub fn transpose(&self) -> Node {
        let value = self.value_ref().transposed();
        self.unary(value, Op::Transpose(self.id))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Node, DiffError> {
        let value = self.value_ref().reshaped(rows, cols)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Node, DiffError> {
        if start > end || end > self.cols {
            return Err(DiffError::Shape(format!(
                "slice_cols {start}..{end} of {} columns",
                self.cols
            )));
        }
        let v = self.value_ref();
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        drop(v);
        let value = Tensor::new(self.rows, end - start, data)?;
        Ok(self.unary(
            value,
            Op::SliceCols {
                a: self.id,
                start,
                end,
            },
        ))
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&self) -> Node {
        let value = Tensor::scalar(self.value_ref().sum());
        self.unary(value, Op::Sum(self.id))
    }

    /// Mean of all entries, as a `1×1` node.
    pub fn mean(&self) -> Node {
        let n = (self.rows * self.cols) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Collapses rows: `m×n` → `1×n`.
    pub fn sum_over_rows(&self) -> Node {
        let v = self.value_ref();
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        drop(v);
        let value = Tensor::new(1, self.cols, out).expect("row sum shape");
        self.unary(value, Op::SumOverRows(self.id))
    }

    /// Collapses columns: `m×n` → `m×1`.
    pub fn sum_over_cols(&self) -> Node {
        let v = self.value_ref();
        let data: Vec<f64> = (0..self.rows).map(|r| v.row(r).iter().sum()).collect();
        drop(v);
        let value = Tensor::new(self.rows, 1, data).expect("col sum shape");
        self.unary(value, Op::SumOverCols(self.id))
    }

    /// Repeats a `1×n` row vector down to `rows×n`.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Node, DiffError> {
        if self.rows != 1 {
            return Err(DiffError::Shape(format!(
                "broadcast_rows needs 1×n, got {}x{}",
                self.rows, self.cols
            )));
        }
        let v = self.value_ref();
        let mut data = Vec::with_capacity(rows * self.cols);
        for _ in 0..rows {
            data.extend_from_slice(v.row(0));
        }
        drop(v);
        let value = Tensor::new(rows, self.cols, data)?;
        Ok(self.unary(value, Op::BroadcastRows(self.id)))
    }

    /// Repeats an `m×1` column vector out to `m×cols`.
    pub fn broadcast_cols(&self, cols: usize) -> Result<Node, DiffError> {
        if self.cols != 1 {
            return Err(DiffError::Shape(format!(
                "broadcast_cols needs m×1, got {}x{}",
                self.rows, self.cols
            )));
        }
        let v = self.value_ref();
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            let x = v.row(r)[0];
            data.extend(std::iter::repeat(x).take(cols));
        }
        drop(v);
        let value = Tensor::new(self.rows, cols, data)?;
        Ok(self.unary(value, Op::BroadcastCols(self.id)))
    }

    /// Row gather: output row `e` is input row `idx[e]`.
    pub fn gather_rows(&self, idx: &Rc<Vec<usize>>) -> Result<Node, DiffError> {
        let v = self.value_ref();
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx.iter() {
            if i >= self.rows {
                return Err(DiffError::Shape(format!(
                    "gather_rows index {i} out of {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(v.row(i));
        }
        drop(v);
        let value = Tensor::new(idx.len(), self.cols, data)?;
        Ok(self.unary(
            value,
            Op::GatherRows {
                a: self.id,
                idx: Rc::clone(idx),
            },
        ))
    }

    /// Row scatter-add: output row `idx[e]` accumulates input row `e`.
    pub fn scatter_add_rows(&self, idx: &Rc<Vec<usize>>, n_rows: usize) -> Result<Node, DiffError> {
        if idx.len() != self.rows {
            return Err(DiffError::Shape(format!(
                "scatter_add_rows: {} indices for {} rows",
                idx.len(),
                self.rows
            )));
        }
        let v = self.value_ref();
        let mut out = Tensor::zeros(n_rows, self.cols);
        for (e, &i) in idx.iter().enumerate() {
            if i >= n_rows {
                return Err(DiffError::Shape(format!(
                    "scatter_add_rows target {i} out of {n_rows} rows"
                )));
            }
            let row = v.row(e);
            let orow = &mut out.data_mut()[i * self.cols..(i + 1) * self.cols];
            for (o, x) in orow.iter_mut().zip(row) {
                *o += x;
            }
        }
        drop(v);
        Ok(self.unary(
            out,
            Op::ScatterAddRows {
                a: self.id,
                idx: Rc::clone(idx),
            },
        ))
    }

    /// Numerically stabilized row-wise softmax.
    ///
    /// The row maximum is subtracted as a constant shift; softmax is
    /// invariant to it, so gradients are unaffected.
    pub fn softmax_rows(&self) -> Result<Node, DiffError> {
        let v = self.value_ref();
        let maxes: Vec<f64> = (0..self.rows)
            .map(|r| v.row(r).iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)))
            .collect();
        drop(v);
        let shift = self
            .tape
            .constant(Tensor::new(self.rows, 1, maxes)?)
            .broadcast_cols(self.cols)?;
        let e = self.sub(&shift)?.exp();
        let denom = e.sum_over_cols().broadcast_cols(self.cols)?;
        e.div(&denom)
    }

    /// Euclidean norm of all entries, as a `1×1` node.
    pub fn l2_norm(&self) -> Result<Node, DiffError> {
        Ok(self.mul(self)?.sum().sqrt())
    }
}

/// Soft-label cross entropy: `−(1/m)·Σ_v Σ_c t·log(p + ε)` with `ε = 1e-12`.
///
/// Rows of `p` and `t` are expected to be probability vectors; the clamp
/// keeps the loss finite for one-hot-like inputs.
pub fn cross_entropy_soft(p: &Node, t: &Node) -> Result<Node, DiffError> {
    if p.shape() != t.shape() {
        return Err(DiffError::Shape(format!(
            "cross_entropy_soft: {}x{} vs {}x{}",
            p.rows(),
            p.cols(),
            t.rows(),
            t.cols()
        )));
    }
    let m = p.rows() as f64;
    Ok(p.add_scalar(1e-12).log().mul(t)?.sum().scale(-1.0 / m))
}

/// Reshapes each node to a single row and concatenates, preserving order.
pub fn flatten_concat(tape: &Tape, parts: &[Node]) -> Result<Node, DiffError> {
    let flat: Vec<Node> = parts
        .iter()
        .map(|p| p.reshape(1, p.rows() * p.cols()))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Node> = flat.iter().collect();
    tape.concat_cols(&refs)
}

// ---------------------------------------------------------------------------
// Backward passes
// ---------------------------------------------------------------------------

impl Node {
    /// Gradients of a scalar node with respect to `wrt`, as plain tensors.
    /// No new operations are recorded.
    pub fn grad_values(&self, wrt: &[&Node]) -> Result<Vec<Tensor>, DiffError> {
        if self.rows * self.cols != 1 {
            return Err(DiffError::Shape(format!(
                "grad of non-scalar {}x{}",
                self.rows, self.cols
            )));
        }
        self.backward_values(&Tensor::scalar(1.0), wrt)
    }

    /// Vector-Jacobian product from an arbitrary node seeded with `seed`,
    /// as plain tensors.
    pub fn vjp_values(&self, seed: &Tensor, wrt: &[&Node]) -> Result<Vec<Tensor>, DiffError> {
        if seed.shape() != (self.rows, self.cols) {
            return Err(DiffError::Shape(format!(
                "seed {}x{} for node {}x{}",
                seed.rows(),
                seed.cols(),
                self.rows,
                self.cols
            )));
        }
        self.backward_values(seed, wrt)
    }

    /// Gradients of a scalar node with respect to `wrt`, recorded on the
    /// tape so they can be differentiated again.
    pub fn grad_nodes(&self, wrt: &[&Node]) -> Result<Vec<Node>, DiffError> {
        if self.rows * self.cols != 1 {
            return Err(DiffError::Shape(format!(
                "grad of non-scalar {}x{}",
                self.rows, self.cols
            )));
        }
        self.check_wrt(wrt)?;
        let seed = self.tape.constant(Tensor::scalar(1.0));
        let mut grads: Vec<Option<Node>> = vec![None; self.id + 1];
        grads[self.id] = Some(seed);

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if wrt.iter().any(|w| w.id == id) {
                // Re-store for collection below; keep propagating too.
                grads[id] = Some(g.clone());
            }
            let op = self.tape.inner.borrow().nodes[id].op.clone();
            self.propagate_nodes(&op, id, &g, &mut grads)?;
        }

        wrt.iter()
            .map(|w| {
                grads[w.id]
                    .clone()
                    .ok_or_else(|| DiffError::Graph(format!("no gradient reached node {}", w.id)))
            })
            .collect()
    }

    fn check_wrt(&self, wrt: &[&Node]) -> Result<(), DiffError> {
        // Structural reachability: every wrt node must be an ancestor of the
        // output and marked differentiable.
        for w in wrt {
            self.tape.check_owns(w)?;
            if !w.requires_grad() {
                return Err(DiffError::Graph(format!(
                    "node {} is not differentiable",
                    w.id
                )));
            }
        }
        let inner = self.tape.inner.borrow();
        let mut reach = vec![false; self.id + 1];
        reach[self.id] = true;
        for id in (0..=self.id).rev() {
            if !reach[id] {
                continue;
            }
            for p in inner.nodes[id].op.inputs() {
                reach[p] = true;
            }
        }
        for w in wrt {
            if w.id > self.id || !reach[w.id] {
                return Err(DiffError::Graph(format!(
                    "node {} is not reachable from the output",
                    w.id
                )));
            }
        }
        Ok(())
    }

    fn backward_values(&self, seed: &Tensor, wrt: &[&Node]) -> Result<Vec<Tensor>, DiffError> {
        self.check_wrt(wrt)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.id + 1];
        grads[self.id] = Some(seed.clone());
        let mut collected: Vec<Option<Tensor>> = vec![None; wrt.len()];

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            for (slot, w) in collected.iter_mut().zip(wrt.iter()) {
                if w.id == id {
                    *slot = Some(g.clone());
                }
            }
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[id];
            let op = node.op.clone();
            drop(inner);
            self.propagate_values(&op, id, &g, &mut grads)?;
        }

        collected
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                t.ok_or_else(|| DiffError::Graph(format!("no gradient reached node {}", wrt[i].id)))
            })
            .collect()
    }

    /// Accumulates `g` into the value-path gradient slot of `id` if that node
    /// participates in differentiation.
    fn acc_value(
        &self,
        grads: &mut [Option<Tensor>],
        id: usize,
        g: Tensor,
    ) -> Result<(), DiffError> {
        if !self.tape.inner.borrow().nodes[id].requires_grad {
            return Ok(());
        }
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate_values(
        &self,
        op: &Op,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), DiffError> {
        let value_of = |i: usize| -> Tensor { self.tape.inner.borrow().nodes[i].value.clone() };
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (value_of(*a), value_of(*b));
                self.acc_value(grads, *a, g.matmul(&bv.transposed())?)?;
                self.acc_value(grads, *b, av.transposed().matmul(g)?)?;
            }
            Op::Spmm { st, b } => {
                self.acc_value(grads, *b, st.mul_dense(g)?)?;
            }
            Op::Add(a, b) => {
                self.acc_value(grads, *a, g.clone())?;
                self.acc_value(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc_value(grads, *a, g.clone())?;
                self.acc_value(grads, *b, g.scaled(-1.0))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (value_of(*a), value_of(*b));
                self.acc_value(grads, *a, g.zip(&bv, |x, y| x * y)?)?;
                self.acc_value(grads, *b, g.zip(&av, |x, y| x * y)?)?;
            }
            Op::Div(a, b) => {
                let (av, bv) = (value_of(*a), value_of(*b));
                self.acc_value(grads, *a, g.zip(&bv, |x, y| x / y)?)?;
                let gb = g
                    .zip(&av, |x, y| x * y)?
                    .zip(&bv, |x, y| -x / (y * y))?;
                self.acc_value(grads, *b, gb)?;
            }
            Op::Scale(a, c) => self.acc_value(grads, *a, g.scaled(*c))?,
            Op::AddScalar(a) => self.acc_value(grads, *a, g.clone())?,
            Op::Relu(a) => {
                let av = value_of(*a);
                self.acc_value(grads, *a, g.zip(&av, |x, y| if y > 0.0 { x } else { 0.0 })?)?;
            }
            Op::LeakyRelu(a, s) => {
                let av = value_of(*a);
                self.acc_value(
                    grads,
                    *a,
                    g.zip(&av, |x, y| if y > 0.0 { x } else { s * x })?,
                )?;
            }
            Op::Elu(a) => {
                let av = value_of(*a);
                self.acc_value(
                    grads,
                    *a,
                    g.zip(&av, |x, y| if y > 0.0 { x } else { x * y.exp() })?,
                )?;
            }
            Op::Exp(a) => {
                let out = value_of(id);
                self.acc_value(grads, *a, g.zip(&out, |x, y| x * y)?)?;
            }
            Op::Log(a) => {
                let av = value_of(*a);
                self.acc_value(grads, *a, g.zip(&av, |x, y| x / y)?)?;
            }
            Op::Sqrt(a) => {
                let out = value_of(id);
                self.acc_value(
                    grads,
                    *a,
                    g.zip(&out, |x, y| if y == 0.0 { 0.0 } else { 0.5 * x / y })?,
                )?;
            }
            Op::Transpose(a) => self.acc_value(grads, *a, g.transposed())?,
            Op::Reshape(a) => {
                let (r, c) = value_of(*a).shape();
                self.acc_value(grads, *a, g.reshaped(r, c)?)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = value_of(*p);
                    let (rows, pcols) = pv.shape();
                    let mut pg = Tensor::zeros(rows, pcols);
                    for r in 0..rows {
                        let src = &g.row(r)[offset..offset + pcols];
                        pg.data_mut()[r * pcols..(r + 1) * pcols].copy_from_slice(src);
                    }
                    self.acc_value(grads, *p, pg)?;
                    offset += pcols;
                }
            }
            Op::SliceCols { a, start, end } => {
                let av = value_of(*a);
                let (rows, acols) = av.shape();
                let mut ag = Tensor::zeros(rows, acols);
                for r in 0..rows {
                    let width = end - start;
                    ag.data_mut()[r * acols + start..r * acols + start + width]
                        .copy_from_slice(g.row(r));
                }
                self.acc_value(grads, *a, ag)?;
            }
            Op::Sum(a) => {
                let (r, c) = value_of(*a).shape();
                self.acc_value(grads, *a, Tensor::full(r, c, g.item()?))?;
            }
            Op::SumOverRows(a) => {
                let (r, c) = value_of(*a).shape();
                let mut ag = Tensor::zeros(r, c);
                for i in 0..r {
                    ag.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.row(0));
                }
                self.acc_value(grads, *a, ag)?;
            }
            Op::SumOverCols(a) => {
                let (r, c) = value_of(*a).shape();
                let mut ag = Tensor::zeros(r, c);
                for i in 0..r {
                    let v = g.get(i, 0);
                    ag.data_mut()[i * c..(i + 1) * c].fill(v);
                }
                self.acc_value(grads, *a, ag)?;
            }
            Op::BroadcastRows(a) => {
                let c = g.cols();
                let mut ag = Tensor::zeros(1, c);
                for r in 0..g.rows() {
                    for (o, x) in ag.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.acc_value(grads, *a, ag)?;
            }
            Op::BroadcastCols(a) => {
                let data: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                self.acc_value(grads, *a, Tensor::new(g.rows(), 1, data)?)?;
            }
            Op::GatherRows { a, idx } => {
                let (ar, c) = value_of(*a).shape();
                let mut ag = Tensor::zeros(ar, c);
                for (e, &i) in idx.iter().enumerate() {
                    let dst = &mut ag.data_mut()[i * c..(i + 1) * c];
                    for (o, x) in dst.iter_mut().zip(g.row(e)) {
                        *o += x;
                    }
                }
                self.acc_value(grads, *a, ag)?;
            }
            Op::ScatterAddRows { a, idx } => {
                let c = g.cols();
                let mut ag = Tensor::zeros(idx.len(), c);
                for (e, &i) in idx.iter().enumerate() {
                    ag.data_mut()[e * c..(e + 1) * c].copy_from_slice(g.row(i));
                }
                self.acc_value(grads, *a, ag)?;
            }
        }
        Ok(())
    }

    fn node_handle(&self, id: usize) -> Node {
        let inner = self.tape.inner.borrow();
        let (rows, cols) = inner.nodes[id].value.shape();
        drop(inner);
        Node {
            tape: self.tape.clone(),
            id,
            rows,
            cols,
        }
    }

    fn acc_node(
        &self,
        grads: &mut [Option<Node>],
        id: usize,
        g: Node,
    ) -> Result<(), DiffError> {
        if !self.tape.inner.borrow().nodes[id].requires_grad {
            return Ok(());
        }
        grads[id] = match grads[id].take() {
            Some(existing) => Some(existing.add(&g)?),
            None => Some(g),
        };
        Ok(())
    }

    fn propagate_nodes(
        &self,
        op: &Op,
        id: usize,
        g: &Node,
        grads: &mut [Option<Node>],
    ) -> Result<(), DiffError> {
        let handle = |i: usize| self.node_handle(i);
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (an, bn) = (handle(*a), handle(*b));
                self.acc_node(grads, *a, g.matmul(&bn.transpose())?)?;
                self.acc_node(grads, *b, an.transpose().matmul(g)?)?;
            }
            Op::Spmm { st, b } => {
                let gb = g.tape.spmm(st, g)?;
                self.acc_node(grads, *b, gb)?;
            }
            Op::Add(a, b) => {
                self.acc_node(grads, *a, g.clone())?;
                self.acc_node(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc_node(grads, *a, g.clone())?;
                self.acc_node(grads, *b, g.neg())?;
            }
            Op::Mul(a, b) => {
                let (an, bn) = (handle(*a), handle(*b));
                self.acc_node(grads, *a, g.mul(&bn)?)?;
                self.acc_node(grads, *b, g.mul(&an)?)?;
            }
            Op::Div(a, b) => {
                let (an, bn) = (handle(*a), handle(*b));
                self.acc_node(grads, *a, g.div(&bn)?)?;
                let gb = g.mul(&an)?.div(&bn.mul(&bn)?)?.neg();
                self.acc_node(grads, *b, gb)?;
            }
            Op::Scale(a, c) => self.acc_node(grads, *a, g.scale(*c))?,
            Op::AddScalar(a) => self.acc_node(grads, *a, g.clone())?,
            Op::Relu(a) => {
                // The activation derivative is piecewise constant in the
                // input, so the mask enters as a constant tensor.
                let mask = self
                    .tape
                    .constant(handle(*a).value().map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                self.acc_node(grads, *a, g.mul(&mask)?)?;
            }
            Op::LeakyRelu(a, s) => {
                let slope = *s;
                let mask = self
                    .tape
                    .constant(handle(*a).value().map(|v| if v > 0.0 { 1.0 } else { slope }));
                self.acc_node(grads, *a, g.mul(&mask)?)?;
            }
            Op::Elu(a) => {
                let mask = self
                    .tape
                    .constant(handle(*a).value().map(|v| if v > 0.0 { 1.0 } else { v.exp() }));
                self.acc_node(grads, *a, g.mul(&mask)?)?;
            }
            Op::Exp(a) => {
                let out = handle(id);
                self.acc_node(grads, *a, g.mul(&out)?)?;
            }
            Op::Log(a) => {
                let an = handle(*a);
                self.acc_node(grads, *a, g.div(&an)?)?;
            }
            Op::Sqrt(a) => {
                // Subgradient 0 where the output is exactly zero; the safe
                // denominator avoids an infinity that the zero mask would
                // turn into NaN.
                let out = handle(id);
                let zero_mask = self
                    .tape
                    .constant(out.value().map(|v| if v == 0.0 { 0.0 } else { 1.0 }));
                let safe = self
                    .tape
                    .constant(out.value().map(|v| if v == 0.0 { 1.0 } else { 0.0 }));
                let denom = out.add(&safe)?;
                let ga = g.scale(0.5).div(&denom)?.mul(&zero_mask)?;
                self.acc_node(grads, *a, ga)?;
            }
            Op::Transpose(a) => self.acc_node(grads, *a, g.transpose())?,
            Op::Reshape(a) => {
                let an = handle(*a);
                self.acc_node(grads, *a, g.reshape(an.rows(), an.cols())?)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pn = handle(*p);
                    let pg = g.slice_cols(offset, offset + pn.cols())?;
                    self.acc_node(grads, *p, pg)?;
                    offset += pn.cols();
                }
            }
            Op::SliceCols { a, start, end } => {
                let an = handle(*a);
                let mut parts: Vec<Node> = Vec::new();
                if *start > 0 {
                    parts.push(self.tape.constant(Tensor::zeros(an.rows(), *start)));
                }
                parts.push(g.clone());
                if *end < an.cols() {
                    parts.push(self.tape.constant(Tensor::zeros(an.rows(), an.cols() - end)));
                }
                let refs: Vec<&Node> = parts.iter().collect();
                let ag = self.tape.concat_cols(&refs)?;
                self.acc_node(grads, *a, ag)?;
            }
            Op::Sum(a) => {
                let an = handle(*a);
                let ag = g.broadcast_rows(an.rows())?.broadcast_cols(an.cols())?;
                self.acc_node(grads, *a, ag)?;
            }
            Op::SumOverRows(a) => {
                let an = handle(*a);
                self.acc_node(grads, *a, g.broadcast_rows(an.rows())?)?;
            }
            Op::SumOverCols(a) => {
                let an = handle(*a);
                self.acc_node(grads, *a, g.broadcast_cols(an.cols())?)?;
            }
            Op::BroadcastRows(a) => self.acc_node(grads, *a, g.sum_over_rows())?,
            Op::BroadcastCols(a) => self.acc_node(grads, *a, g.sum_over_cols())?,
            Op::GatherRows { a, idx } => {
                let an = handle(*a);
                let ag = g.scatter_add_rows(idx, an.rows())?;
                self.acc_node(grads, *a, ag)?;
            }
            Op::ScatterAddRows { a, idx } => {
                let ag = g.gather_rows(idx)?;
                self.acc_node(grads, *a, ag)?;
            }
        }
        Ok(())
    }
}
