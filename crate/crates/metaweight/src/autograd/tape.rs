//! Reverse-mode differentiation over an append-only computation record.
//!
//! Every operation validates shapes, rejects non-finite outputs, and (while
//! recording) appends a node holding the operation kind, its input handles,
//! and the produced values. `backward` walks the record in reverse; each
//! vector-Jacobian product is expressed through the same public operations,
//! so when `higher_order` is set the produced gradients are themselves
//! recorded and can be differentiated again.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddConst,
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    Matmul,
    Transpose,
    SumAll,
    SumRows,
    SumCols,
    BroadcastScalar,
    BroadcastRows,
    BroadcastCols,
    GatherRows(Arc<Vec<usize>>),
    ScatterAddRows(Arc<Vec<usize>>),
    PickCols(Arc<Vec<usize>>),
    ScatterCols(Arc<Vec<usize>>),
    SliceRows { start: usize },
    PadRows { start: usize },
    SliceCols { start: usize },
    PadCols { start: usize },
    ConcatRows,
    ConcatCols,
    Reshape,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddConst => "add_const",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Sqrt => "sqrt",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::SumAll => "sum_all",
            Op::SumRows => "sum_rows",
            Op::SumCols => "sum_cols",
            Op::BroadcastScalar => "broadcast_scalar",
            Op::BroadcastRows => "broadcast_rows",
            Op::BroadcastCols => "broadcast_cols",
            Op::GatherRows(_) => "gather_rows",
            Op::ScatterAddRows(_) => "scatter_add_rows",
            Op::PickCols(_) => "pick_cols",
            Op::ScatterCols(_) => "scatter_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::PadRows { .. } => "pad_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::ConcatRows => "concat_rows",
            Op::ConcatCols => "concat_cols",
            Op::Reshape => "reshape",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    out_shape: Vec<usize>,
    out_data: Arc<Vec<f64>>,
    requires: bool,
}

/// The active computation record. Single-threaded by construction.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// A tape that records nothing; forward values only.
    pub fn inference() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn requires(&self, t: &Tensor) -> bool {
        match t.node {
            Some(id) => self.nodes.borrow()[id].requires,
            None => false,
        }
    }

    /// Register a differentiable leaf. Gradients are reported with respect
    /// to the returned handle, not the argument.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        if !self.recording.get() {
            return t.detach();
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let out = Tensor::with_node(t.shape().to_vec(), t.data_arc(), Some(id));
        nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            out_shape: t.shape().to_vec(),
            out_data: t.data_arc(),
            requires: true,
        });
        out
    }

    fn push(&self, op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name().into(),
            });
        }
        let data = Arc::new(data);
        if !self.recording.get() {
            return Ok(Tensor::with_node(shape, data, None));
        }
        let requires = inputs.iter().any(|t| self.requires(t));
        if !requires {
            // Constant subgraphs never receive adjoints; keep them off the record.
            return Ok(Tensor::with_node(shape, data, None));
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let out = Tensor::with_node(shape.clone(), Arc::clone(&data), Some(id));
        nodes.push(Node {
            op,
            inputs,
            out_shape: shape,
            out_data: data,
            requires,
        });
        Ok(out)
    }

    fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    // ── Elementwise ───────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.push(Op::Add, vec![a.clone(), b.clone()], a.shape().to_vec(), data)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.push(Op::Sub, vec![a.clone(), b.clone()], a.shape().to_vec(), data)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.push(Op::Mul, vec![a.clone(), b.clone()], a.shape().to_vec(), data)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape("div", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
        self.push(Op::Div, vec![a.clone(), b.clone()], a.shape().to_vec(), data)
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| -x).collect();
        self.push(Op::Neg, vec![a.clone()], a.shape().to_vec(), data)
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x * c).collect();
        self.push(Op::Scale(c), vec![a.clone()], a.shape().to_vec(), data)
    }

    pub fn add_const(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x + c).collect();
        self.push(Op::AddConst, vec![a.clone()], a.shape().to_vec(), data)
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.exp()).collect();
        self.push(Op::Exp, vec![a.clone()], a.shape().to_vec(), data)
    }

    pub fn ln(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.ln()).collect();
        self.push(Op::Ln, vec![a.clone()], a.shape().to_vec(), data)
    }

    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.sqrt()).collect();
        self.push(Op::Sqrt, vec![a.clone()], a.shape().to_vec(), data)
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh, vec![a.clone()], a.shape().to_vec(), data)
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu, vec![a.clone()], a.shape().to_vec(), data)
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        let data = a
            .data()
            .iter()
            .map(|x| {
                if *x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        self.push(Op::Sigmoid, vec![a.clone()], a.shape().to_vec(), data)
    }

    pub fn softplus(&self, a: &Tensor) -> Result<Tensor> {
        let data = a
            .data()
            .iter()
            .map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        self.push(Op::Softplus, vec![a.clone()], a.shape().to_vec(), data)
    }

    // ── Linear algebra ────────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        let ad = a.data();
        let bd = b.data();
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push(Op::Matmul, vec![a.clone(), b.clone()], vec![m, n], out)
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let ad = a.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        self.push(Op::Transpose, vec![a.clone()], vec![c, r], out)
    }

    // ── Reductions and broadcasts ─────────────────────────────────────

    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        let s = a.data().iter().sum();
        self.push(Op::SumAll, vec![a.clone()], vec![], vec![s])
    }

    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        let n = a.len().max(1) as f64;
        let s = self.sum_all(a)?;
        self.scale(&s, 1.0 / n)
    }

    /// Scalar → constant-filled tensor of `shape`.
    pub fn broadcast_scalar(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if !a.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "broadcast_scalar",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let n: usize = shape.iter().product();
        let v = a.item();
        self.push(
            Op::BroadcastScalar,
            vec![a.clone()],
            shape.to_vec(),
            vec![v; n],
        )
    }

    /// `[r,c] -> [c]`, summing over rows.
    pub fn sum_rows(&self, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "sum_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += a.data()[i * c + j];
            }
        }
        self.push(Op::SumRows, vec![a.clone()], vec![c], out)
    }

    /// `[c] -> [rows,c]`, repeating the row.
    pub fn broadcast_rows(&self, a: &Tensor, rows: usize) -> Result<Tensor> {
        if a.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![rows],
            });
        }
        let c = a.shape()[0];
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(a.data());
        }
        self.push(Op::BroadcastRows, vec![a.clone()], vec![rows, c], out)
    }

    /// `[r,c] -> [r]`, summing over columns.
    pub fn sum_cols(&self, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "sum_cols",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let out = (0..r)
            .map(|i| a.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        self.push(Op::SumCols, vec![a.clone()], vec![r], out)
    }

    /// `[r] -> [r,cols]`, repeating each entry along its row.
    pub fn broadcast_cols(&self, a: &Tensor, cols: usize) -> Result<Tensor> {
        if a.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_cols",
                lhs: a.shape().to_vec(),
                rhs: vec![cols],
            });
        }
        let r = a.shape()[0];
        let mut out = Vec::with_capacity(r * cols);
        for v in a.data() {
            out.extend(std::iter::repeat(*v).take(cols));
        }
        self.push(Op::BroadcastCols, vec![a.clone()], vec![r, cols], out)
    }

    // ── Indexing ──────────────────────────────────────────────────────

    /// Embedding-style lookup: rows of `a` selected by `idx`.
    pub fn gather_rows(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::invalid(format!(
                    "gather_rows: index {} out of range for {} rows",
                    i, r
                )));
            }
            out.extend_from_slice(&a.data()[i * c..(i + 1) * c]);
        }
        let idx = Arc::new(idx.to_vec());
        self.push(
            Op::GatherRows(idx),
            vec![a.clone()],
            vec![out.len() / c, c],
            out,
        )
    }

    /// Adjoint of `gather_rows`: rows of `a` accumulated into `rows` slots.
    pub fn scatter_add_rows(&self, a: &Tensor, idx: &[usize], rows: usize) -> Result<Tensor> {
        if a.rank() != 2 || a.shape()[0] != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let c = a.shape()[1];
        let mut out = vec![0.0; rows * c];
        for (t, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::invalid(format!(
                    "scatter_add_rows: index {} out of range for {} rows",
                    i, rows
                )));
            }
            for j in 0..c {
                out[i * c + j] += a.data()[t * c + j];
            }
        }
        let idx = Arc::new(idx.to_vec());
        self.push(Op::ScatterAddRows(idx), vec![a.clone()], vec![rows, c], out)
    }

    /// One element per row: `out[i] = a[i, cols[i]]`.
    pub fn pick_cols(&self, a: &Tensor, cols: &[usize]) -> Result<Tensor> {
        if a.rank() != 2 || a.shape()[0] != cols.len() {
            return Err(Error::ShapeMismatch {
                op: "pick_cols",
                lhs: a.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let c = a.shape()[1];
        let mut out = Vec::with_capacity(cols.len());
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::invalid(format!(
                    "pick_cols: column {} out of range for width {}",
                    j, c
                )));
            }
            out.push(a.data()[i * c + j]);
        }
        let cols = Arc::new(cols.to_vec());
        self.push(Op::PickCols(cols), vec![a.clone()], vec![out.len()], out)
    }

    /// Adjoint of `pick_cols`: vector scattered into one slot per row.
    pub fn scatter_cols(&self, a: &Tensor, cols: &[usize], width: usize) -> Result<Tensor> {
        if a.rank() != 1 || a.shape()[0] != cols.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_cols",
                lhs: a.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let r = a.shape()[0];
        let mut out = vec![0.0; r * width];
        for (i, &j) in cols.iter().enumerate() {
            if j >= width {
                return Err(Error::invalid(format!(
                    "scatter_cols: column {} out of range for width {}",
                    j, width
                )));
            }
            out[i * width + j] = a.data()[i];
        }
        let cols = Arc::new(cols.to_vec());
        self.push(Op::ScatterCols(cols), vec![a.clone()], vec![r, width], out)
    }

    // ── Slicing and concatenation ─────────────────────────────────────

    /// Row slice of a matrix or contiguous slice of a vector.
    pub fn slice_rows(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        if a.rank() == 0 || start + len > r {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = a.data()[start * c..(start + len) * c].to_vec();
        let shape = if a.rank() == 1 { vec![len] } else { vec![len, c] };
        self.push(Op::SliceRows { start }, vec![a.clone()], shape, out)
    }

    /// Adjoint of `slice_rows`: embed into zeros with `total` rows.
    pub fn pad_rows(&self, a: &Tensor, start: usize, total: usize) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        if a.rank() == 0 || start + r > total {
            return Err(Error::ShapeMismatch {
                op: "pad_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![start, total],
            });
        }
        let mut out = vec![0.0; total * c];
        out[start * c..(start + r) * c].copy_from_slice(a.data());
        let shape = if a.rank() == 1 {
            vec![total]
        } else {
            vec![total, c]
        };
        self.push(Op::PadRows { start }, vec![a.clone()], shape, out)
    }

    pub fn slice_cols(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        if a.rank() != 2 || start + len > a.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: a.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&a.data()[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols { start }, vec![a.clone()], vec![r, len], out)
    }

    pub fn pad_cols(&self, a: &Tensor, start: usize, total: usize) -> Result<Tensor> {
        if a.rank() != 2 || start + a.shape()[1] > total {
            return Err(Error::ShapeMismatch {
                op: "pad_cols",
                lhs: a.shape().to_vec(),
                rhs: vec![start, total],
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; r * total];
        for i in 0..r {
            out[i * total + start..i * total + start + c].copy_from_slice(&a.data()[i * c..(i + 1) * c]);
        }
        self.push(Op::PadCols { start }, vec![a.clone()], vec![r, total], out)
    }

    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: no inputs"));
        }
        let c = parts[0].cols();
        let rank = parts[0].rank();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.rank() != rank || p.cols() != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += p.rows();
            out.extend_from_slice(p.data());
        }
        let shape = if rank == 1 { vec![rows] } else { vec![rows, c] };
        let inputs = parts.iter().map(|p| (*p).clone()).collect();
        self.push(Op::ConcatRows, inputs, shape, out)
    }

    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        let r = parts[0].rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if p.rank() != 2 || p.shape()[0] != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(p.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let c = p.shape()[1];
                out.extend_from_slice(&p.data()[i * c..(i + 1) * c]);
            }
        }
        let inputs = parts.iter().map(|p| (*p).clone()).collect();
        self.push(Op::ConcatCols, inputs, vec![r, total], out)
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != a.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        self.push(
            Op::Reshape,
            vec![a.clone()],
            shape.to_vec(),
            a.data().to_vec(),
        )
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Gradients of a scalar `output` with respect to each tensor in `wrt`.
    ///
    /// Tensors not reachable from the output get a zero gradient. With
    /// `higher_order`, the returned gradients stay on the record and can be
    /// differentiated again; otherwise nothing new is recorded and the
    /// results are detached.
    pub fn backward(
        &self,
        output: &Tensor,
        wrt: &[&Tensor],
        higher_order: bool,
    ) -> Result<Vec<Tensor>> {
        if !output.is_scalar() {
            return Err(Error::invalid(format!(
                "backward: output must be scalar, got shape {:?}",
                output.shape()
            )));
        }
        let out_id = match output.node {
            Some(id) => id,
            None => return Ok(wrt.iter().map(|t| Tensor::zeros(t.shape())).collect()),
        };
        let prev = self.recording.get();
        self.recording.set(higher_order);
        let result = self.backward_inner(out_id, wrt);
        self.recording.set(prev);
        result
    }

    fn backward_inner(&self, out_id: usize, wrt: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut adjoint: Vec<Option<Tensor>> = vec![None; out_id + 1];
        adjoint[out_id] = Some(Tensor::scalar(1.0));

        for id in (0..=out_id).rev() {
            // Adjoints are kept after processing so gradients can be read off
            // any node, not just leaves.
            let g = match adjoint[id].clone() {
                Some(g) => g,
                None => continue,
            };
            let (op, inputs, output) = {
                let nodes = self.nodes.borrow();
                let n = &nodes[id];
                if matches!(n.op, Op::Leaf) {
                    continue;
                }
                (
                    n.op.clone(),
                    n.inputs.clone(),
                    Tensor::with_node(n.out_shape.clone(), Arc::clone(&n.out_data), Some(id)),
                )
            };
            let contribs = self.vjp(&op, &inputs, &output, &g)?;
            for (inp, contrib) in inputs.iter().zip(contribs) {
                let contrib = match contrib {
                    Some(c) => c,
                    None => continue,
                };
                let pid = match inp.node {
                    Some(pid) if self.nodes.borrow()[pid].requires => pid,
                    _ => continue,
                };
                adjoint[pid] = Some(match adjoint[pid].take() {
                    Some(acc) => self.add(&acc, &contrib)?,
                    None => contrib,
                });
            }
        }

        let mut grads = Vec::with_capacity(wrt.len());
        for t in wrt {
            let g = t
                .node
                .filter(|id| *id <= out_id)
                .and_then(|id| adjoint[id].clone())
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            grads.push(g);
        }
        Ok(grads)
    }

    fn vjp(
        &self,
        op: &Op,
        inputs: &[Tensor],
        output: &Tensor,
        g: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let one = |t: &Tensor| Tensor::full(t.shape(), 1.0);
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(self.neg(g)?)],
            Op::Mul => vec![
                Some(self.mul(g, &inputs[1])?),
                Some(self.mul(g, &inputs[0])?),
            ],
            Op::Div => {
                let da = self.div(g, &inputs[1])?;
                let gy = self.mul(g, output)?;
                let db = self.neg(&self.div(&gy, &inputs[1])?)?;
                vec![Some(da), Some(db)]
            }
            Op::Neg => vec![Some(self.neg(g)?)],
            Op::Scale(c) => vec![Some(self.scale(g, *c)?)],
            Op::AddConst => vec![Some(g.clone())],
            Op::Exp => vec![Some(self.mul(g, output)?)],
            Op::Ln => vec![Some(self.div(g, &inputs[0])?)],
            Op::Sqrt => vec![Some(self.div(&self.scale(g, 0.5)?, output)?)],
            Op::Tanh => {
                let y2 = self.mul(output, output)?;
                let d = self.sub(&one(output), &y2)?;
                vec![Some(self.mul(g, &d)?)]
            }
            Op::Relu => {
                let mask: Vec<f64> = inputs[0]
                    .data()
                    .iter()
                    .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                let mask = Tensor::from_vec(inputs[0].shape().to_vec(), mask)?;
                vec![Some(self.mul(g, &mask)?)]
            }
            Op::Sigmoid => {
                let omy = self.sub(&one(output), output)?;
                let d = self.mul(output, &omy)?;
                vec![Some(self.mul(g, &d)?)]
            }
            Op::Softplus => {
                let s = self.sigmoid(&inputs[0])?;
                vec![Some(self.mul(g, &s)?)]
            }
            Op::Matmul => {
                let da = self.matmul(g, &self.transpose(&inputs[1])?)?;
                let db = self.matmul(&self.transpose(&inputs[0])?, g)?;
                vec![Some(da), Some(db)]
            }
            Op::Transpose => vec![Some(self.transpose(g)?)],
            Op::SumAll => vec![Some(self.broadcast_scalar(g, inputs[0].shape())?)],
            Op::SumRows => vec![Some(self.broadcast_rows(g, inputs[0].shape()[0])?)],
            Op::SumCols => vec![Some(self.broadcast_cols(g, inputs[0].shape()[1])?)],
            Op::BroadcastScalar => vec![Some(self.sum_all(g)?)],
            Op::BroadcastRows => vec![Some(self.sum_rows(g)?)],
            Op::BroadcastCols => vec![Some(self.sum_cols(g)?)],
            Op::GatherRows(idx) => {
                vec![Some(self.scatter_add_rows(g, idx, inputs[0].shape()[0])?)]
            }
            Op::ScatterAddRows(idx) => vec![Some(self.gather_rows(g, idx)?)],
            Op::PickCols(cols) => vec![Some(self.scatter_cols(g, cols, inputs[0].shape()[1])?)],
            Op::ScatterCols(cols) => vec![Some(self.pick_cols(g, cols)?)],
            Op::SliceRows { start, .. } => {
                vec![Some(self.pad_rows(g, *start, inputs[0].rows())?)]
            }
            Op::PadRows { start, .. } => {
                vec![Some(self.slice_rows(g, *start, inputs[0].rows())?)]
            }
            Op::SliceCols { start, .. } => {
                vec![Some(self.pad_cols(g, *start, inputs[0].shape()[1])?)]
            }
            Op::PadCols { start, .. } => {
                vec![Some(self.slice_cols(g, *start, inputs[0].shape()[1])?)]
            }
            Op::ConcatRows => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for inp in inputs {
                    out.push(Some(self.slice_rows(g, offset, inp.rows())?));
                    offset += inp.rows();
                }
                out
            }
            Op::ConcatCols => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for inp in inputs {
                    out.push(Some(self.slice_cols(g, offset, inp.shape()[1])?));
                    offset += inp.shape()[1];
                }
                out
            }
            Op::Reshape => vec![Some(self.reshape(g, inputs[0].shape())?)],
        })
    }
}
