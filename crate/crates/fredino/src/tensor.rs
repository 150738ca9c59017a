//! Dense f64 matrices with a reverse-mode differentiation tape.
//!
//! The tape is explicit and scoped: ops are methods on [`Tape`], values flow
//! through [`Tensor`]s that optionally carry a node id. A tape built with
//! [`Tape::inactive`] computes values without recording, so inference shares
//! the exact same code path as training at zero bookkeeping cost.
//!
//! Inputs can be registered as leaves, which makes input-gradients
//! (d output / d input of a network) available through the same `backward`
//! call as parameter gradients.
//!
//! Every op validates shapes and rejects non-finite results at the op
//! boundary, so a diverging fixed-point iteration surfaces as an error
//! instead of silently poisoning downstream values.

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

// ───────────────────────────── tensor ─────────────────────────────

#[derive(Clone, Debug)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// (tape id, node index) when this value is tracked.
    node: Option<(u64, usize)>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("{} values for {}x{}", data.len(), rows, cols),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteValue { op: "Tensor::new" });
        }
        Ok(Tensor { rows, cols, data, node: None })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols], node: None }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols], node: None }
    }

    /// 1x1 tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v], node: None }
    }

    /// n x 1 column vector.
    pub fn column(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(n, 1, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Mutable access for in-place parameter updates. Drops any tape
    /// attachment: a mutated value no longer matches the recorded node.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.node = None;
        &mut self.data
    }

    /// Value copy with no tape attachment.
    pub fn detach(&self) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.clone(), node: None }
    }

    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

// ───────────────────────────── raw kernels ─────────────────────────────

/// c (m x n) = a (m x k) · b (k x n), row-major. ikj order keeps the inner
/// loop contiguous in both c and b so it vectorizes.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let do_row = |i: usize, crow: &mut [f64]| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..kk * n + n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    };
    // Row-partitioned: each output row is written by exactly one task and
    // summed sequentially, so the result is independent of thread count.
    if m * k * n >= 1 << 21 && rayon::current_num_threads() > 1 {
        use rayon::prelude::*;
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| do_row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            do_row(i, crow);
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn axpy(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

// ───────────────────────────── ops ─────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Pointwise {
    Tanh,
    Relu,
    Silu,
    Sigmoid,
    Exp,
    Ln,
    Square,
    Sqrt,
}

impl Pointwise {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Pointwise::Tanh => x.tanh(),
            Pointwise::Relu => x.max(0.0),
            Pointwise::Silu => x * sigmoid(x),
            Pointwise::Sigmoid => sigmoid(x),
            Pointwise::Exp => x.exp(),
            Pointwise::Ln => x.ln(),
            Pointwise::Square => x * x,
            Pointwise::Sqrt => x.sqrt(),
        }
    }

    /// Derivative given input x and output y = apply(x).
    /// relu takes subgradient 0 at x = 0.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Pointwise::Tanh => 1.0 - y * y,
            Pointwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pointwise::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Pointwise::Sigmoid => y * (1.0 - y),
            Pointwise::Exp => y,
            Pointwise::Ln => 1.0 / x,
            Pointwise::Square => 2.0 * x,
            Pointwise::Sqrt => 0.5 / y,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

enum Op {
    /// Parameter or input registered for gradients.
    Leaf,
    /// Untracked operand pulled onto the tape; receives no reported gradient.
    Constant,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Hadamard { a: usize, b: usize },
    Pointwise { a: usize, f: Pointwise },
    Sum { a: usize },
    Mean { a: usize },
    Transpose { a: usize },
    ConcatCols { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    Reshape { a: usize },
    /// a (m x n) + row (1 x n) added to every row.
    AddRowBroadcast { a: usize, row: usize },
    /// a (m x n) + col (m x 1) added to every column.
    AddColBroadcast { a: usize, col: usize },
    /// Row i*n+j of the (m*n x h) output is a[i,:] + b[j,:].
    PairRowSum { a: usize, b: usize },
    /// a scaled entrywise by a 1x1 tensor.
    ScaleT { a: usize, s: usize },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

// ───────────────────────────── tape ─────────────────────────────

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

pub struct Tape {
    id: u64,
    active: bool,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// Recording tape.
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            active: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Computes values only; never records. For inference.
    pub fn inactive() -> Self {
        Tape { id: 0, active: false, nodes: RefCell::new(Vec::new()) }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Register a value as a differentiable leaf.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let mut out = t.detach();
        if self.active {
            let id = self.push(Node {
                op: Op::Leaf,
                rows: out.rows,
                cols: out.cols,
                value: out.data.clone(),
            });
            out.node = Some((self.id, id));
        }
        out
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Node index of t, registering untracked operands as constants.
    fn operand(&self, t: &Tensor) -> usize {
        match t.node {
            Some((tape, id)) if tape == self.id => id,
            _ => self.push(Node {
                op: Op::Constant,
                rows: t.rows,
                cols: t.cols,
                value: t.data.clone(),
            }),
        }
    }

    fn finish(&self, op: impl FnOnce(&Self) -> Op, rows: usize, cols: usize, data: Vec<f64>, name: &'static str) -> Result<Tensor> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteValue { op: name });
        }
        let mut out = Tensor { rows, cols, data, node: None };
        if self.active {
            let id = self.push(Node { op: op(self), rows, cols, value: out.data.clone() });
            out.node = Some((self.id, id));
        }
        Ok(out)
    }

    fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
        Error::ShapeMismatch {
            op,
            detail: format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols),
        }
    }

    // ───────────── forward ops ─────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.cols != b.rows {
            return Err(Self::shape_err("matmul", a, b));
        }
        let data = matmul_raw(&a.data, &b.data, a.rows, a.cols, b.cols);
        self.finish(
            |t| Op::Matmul { a: t.operand(a), b: t.operand(b) },
            a.rows,
            b.cols,
            data,
            "matmul",
        )
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if (a.rows, a.cols) != (b.rows, b.cols) {
            return Err(Self::shape_err("add", a, b));
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        self.finish(|t| Op::Add { a: t.operand(a), b: t.operand(b) }, a.rows, a.cols, data, "add")
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if (a.rows, a.cols) != (b.rows, b.cols) {
            return Err(Self::shape_err("sub", a, b));
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        self.finish(|t| Op::Sub { a: t.operand(a), b: t.operand(b) }, a.rows, a.cols, data, "sub")
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data.iter().map(|x| c * x).collect();
        self.finish(|t| Op::Scale { a: t.operand(a), c }, a.rows, a.cols, data, "scale")
    }

    pub fn hadamard(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if (a.rows, a.cols) != (b.rows, b.cols) {
            return Err(Self::shape_err("hadamard", a, b));
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        self.finish(
            |t| Op::Hadamard { a: t.operand(a), b: t.operand(b) },
            a.rows,
            a.cols,
            data,
            "hadamard",
        )
    }

    pub fn pointwise(&self, a: &Tensor, f: Pointwise) -> Result<Tensor> {
        let data = a.data.iter().map(|&x| f.apply(x)).collect();
        self.finish(|t| Op::Pointwise { a: t.operand(a), f }, a.rows, a.cols, data, "pointwise")
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let s = a.data.iter().sum();
        self.finish(|t| Op::Sum { a: t.operand(a) }, 1, 1, vec![s], "sum")
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        if a.data.is_empty() {
            return Err(Error::EmptyInput);
        }
        let s = a.data.iter().sum::<f64>() / a.data.len() as f64;
        self.finish(|t| Op::Mean { a: t.operand(a) }, 1, 1, vec![s], "mean")
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let data = transpose_raw(&a.data, a.rows, a.cols);
        self.finish(|t| Op::Transpose { a: t.operand(a) }, a.cols, a.rows, data, "transpose")
    }

    /// Concatenate along columns; all parts must share the row count.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptyInput);
        }
        let rows = parts[0].rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::ShapeMismatch { op: "concat_cols", detail: "row counts differ".into() });
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = vec![0.0; rows * cols];
        let mut at = 0;
        for p in parts {
            for i in 0..rows {
                data[i * cols + at..i * cols + at + p.cols]
                    .copy_from_slice(&p.data[i * p.cols..(i + 1) * p.cols]);
            }
            at += p.cols;
        }
        self.finish(
            |t| Op::ConcatCols { parts: parts.iter().map(|p| t.operand(p)).collect() },
            rows,
            cols,
            data,
            "concat_cols",
        )
    }

    pub fn slice_rows(&self, a: &Tensor, start: usize, count: usize) -> Result<Tensor> {
        if start + count > a.rows {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {}..{} of {}", start, start + count, a.rows),
            });
        }
        let data = a.data[start * a.cols..(start + count) * a.cols].to_vec();
        self.finish(|t| Op::SliceRows { a: t.operand(a), start }, count, a.cols, data, "slice_rows")
    }

    pub fn slice_cols(&self, a: &Tensor, start: usize, count: usize) -> Result<Tensor> {
        if start + count > a.cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols {}..{} of {}", start, start + count, a.cols),
            });
        }
        let mut data = vec![0.0; a.rows * count];
        for i in 0..a.rows {
            data[i * count..(i + 1) * count]
                .copy_from_slice(&a.data[i * a.cols + start..i * a.cols + start + count]);
        }
        self.finish(|t| Op::SliceCols { a: t.operand(a), start }, a.rows, count, data, "slice_cols")
    }

    /// Same data, new shape (row-major order preserved).
    pub fn reshape(&self, a: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != a.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{}x{} from {} values", rows, cols, a.data.len()),
            });
        }
        self.finish(|t| Op::Reshape { a: t.operand(a) }, rows, cols, a.data.clone(), "reshape")
    }

    pub fn add_row_broadcast(&self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        if row.rows != 1 || row.cols != a.cols {
            return Err(Self::shape_err("add_row_broadcast", a, row));
        }
        let mut data = a.data.clone();
        for chunk in data.chunks_mut(a.cols) {
            for (d, r) in chunk.iter_mut().zip(&row.data) {
                *d += r;
            }
        }
        self.finish(
            |t| Op::AddRowBroadcast { a: t.operand(a), row: t.operand(row) },
            a.rows,
            a.cols,
            data,
            "add_row_broadcast",
        )
    }

    pub fn add_col_broadcast(&self, a: &Tensor, col: &Tensor) -> Result<Tensor> {
        if col.cols != 1 || col.rows != a.rows {
            return Err(Self::shape_err("add_col_broadcast", a, col));
        }
        let mut data = a.data.clone();
        for (i, chunk) in data.chunks_mut(a.cols).enumerate() {
            let c = col.data[i];
            for d in chunk.iter_mut() {
                *d += c;
            }
        }
        self.finish(
            |t| Op::AddColBroadcast { a: t.operand(a), col: t.operand(col) },
            a.rows,
            a.cols,
            data,
            "add_col_broadcast",
        )
    }

    /// All-pairs row sum: row i*n+j of the (m*n x h) result is a[i,:] + b[j,:].
    ///
    /// Equivalent to stacking every concatenated pair [a_i, b_j] and multiplying
    /// by a block matrix, but costs O(m n h) instead of a dense matmul.
    pub fn pair_row_sum(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.cols != b.cols {
            return Err(Self::shape_err("pair_row_sum", a, b));
        }
        let h = a.cols;
        let mut data = vec![0.0; a.rows * b.rows * h];
        for i in 0..a.rows {
            let arow = &a.data[i * h..(i + 1) * h];
            for j in 0..b.rows {
                let out = &mut data[(i * b.rows + j) * h..(i * b.rows + j + 1) * h];
                for ((o, &x), &y) in out.iter_mut().zip(arow).zip(&b.data[j * h..(j + 1) * h]) {
                    *o = x + y;
                }
            }
        }
        self.finish(
            |t| Op::PairRowSum { a: t.operand(a), b: t.operand(b) },
            a.rows * b.rows,
            h,
            data,
            "pair_row_sum",
        )
    }

    /// Entrywise product with a 1x1 tensor (differentiable scalar gain).
    pub fn scale_t(&self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.rows != 1 || s.cols != 1 {
            return Err(Self::shape_err("scale_t", a, s));
        }
        let c = s.data[0];
        let data = a.data.iter().map(|x| c * x).collect();
        self.finish(
            |t| Op::ScaleT { a: t.operand(a), s: t.operand(s) },
            a.rows,
            a.cols,
            data,
            "scale_t",
        )
    }

    // ───────────── backward ─────────────

    /// Reverse accumulation from a scalar loss. Returns gradients addressable
    /// by the tensors handed out by this tape.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let seed = match loss.node {
            Some((tape, id)) if tape == self.id => id,
            _ => return Err(Error::NotOnTape),
        };
        if loss.rows != 1 || loss.cols != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be 1x1, got {}x{}", loss.rows, loss.cols),
            });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[seed] = Some(vec![1.0]);

        for id in (0..=seed).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Matmul { a, b } => {
                    let (na, nb) = (&nodes[*a], &nodes[*b]);
                    // dA = dC·Bᵀ, dB = Aᵀ·dC
                    let bt = transpose_raw(&nb.value, nb.rows, nb.cols);
                    let da = matmul_raw(&g, &bt, na.rows, nb.cols, nb.rows);
                    let at = transpose_raw(&na.value, na.rows, na.cols);
                    let db = matmul_raw(&at, &g, na.cols, na.rows, nb.cols);
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = g.iter().map(|v| c * v).collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Hadamard { a, b } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let da: Vec<f64> = g.iter().zip(vb).map(|(gv, y)| gv * y).collect();
                    let db: Vec<f64> = g.iter().zip(va).map(|(gv, x)| gv * x).collect();
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Pointwise { a, f } => {
                    let x = &nodes[*a].value;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(x.iter().zip(&node.value))
                        .map(|(gv, (&xi, &yi))| gv * f.derivative(xi, yi))
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Sum { a } => {
                    let da = vec![g[0]; nodes[*a].value.len()];
                    accumulate(&mut grads, *a, &da);
                }
                Op::Mean { a } => {
                    let n = nodes[*a].value.len();
                    let da = vec![g[0] / n as f64; n];
                    accumulate(&mut grads, *a, &da);
                }
                Op::Transpose { a } => {
                    let da = transpose_raw(&g, node.rows, node.cols);
                    accumulate(&mut grads, *a, &da);
                }
                Op::ConcatCols { parts } => {
                    let mut at = 0;
                    for &p in parts {
                        let pc = nodes[p].cols;
                        let mut dp = vec![0.0; nodes[p].value.len()];
                        for i in 0..node.rows {
                            dp[i * pc..(i + 1) * pc]
                                .copy_from_slice(&g[i * node.cols + at..i * node.cols + at + pc]);
                        }
                        accumulate(&mut grads, p, &dp);
                        at += pc;
                    }
                }
                Op::SliceRows { a, start } => {
                    let na = &nodes[*a];
                    let mut da = vec![0.0; na.value.len()];
                    da[start * na.cols..start * na.cols + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *a, &da);
                }
                Op::SliceCols { a, start } => {
                    let na = &nodes[*a];
                    let mut da = vec![0.0; na.value.len()];
                    for i in 0..node.rows {
                        da[i * na.cols + start..i * na.cols + start + node.cols]
                            .copy_from_slice(&g[i * node.cols..(i + 1) * node.cols]);
                    }
                    accumulate(&mut grads, *a, &da);
                }
                Op::Reshape { a } => {
                    accumulate(&mut grads, *a, &g);
                }
                Op::AddRowBroadcast { a, row } => {
                    accumulate(&mut grads, *a, &g);
                    let mut dr = vec![0.0; node.cols];
                    for chunk in g.chunks(node.cols) {
                        axpy(&mut dr, chunk, 1.0);
                    }
                    accumulate(&mut grads, *row, &dr);
                }
                Op::AddColBroadcast { a, col } => {
                    accumulate(&mut grads, *a, &g);
                    let dc: Vec<f64> = g.chunks(node.cols).map(|c| c.iter().sum()).collect();
                    accumulate(&mut grads, *col, &dc);
                }
                Op::PairRowSum { a, b } => {
                    let h = node.cols;
                    let nb = nodes[*b].rows;
                    let mut da = vec![0.0; nodes[*a].value.len()];
                    let mut db = vec![0.0; nodes[*b].value.len()];
                    for (pair, chunk) in g.chunks(h).enumerate() {
                        let i = pair / nb;
                        let j = pair % nb;
                        axpy(&mut da[i * h..(i + 1) * h], chunk, 1.0);
                        axpy(&mut db[j * h..(j + 1) * h], chunk, 1.0);
                    }
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::ScaleT { a, s } => {
                    let c = nodes[*s].value[0];
                    let da: Vec<f64> = g.iter().map(|v| c * v).collect();
                    accumulate(&mut grads, *a, &da);
                    let ds: f64 = g.iter().zip(&nodes[*a].value).map(|(gv, x)| gv * x).sum();
                    accumulate(&mut grads, *s, &[ds]);
                }
            }
        }

        let shapes = nodes.iter().map(|n| (n.rows, n.cols)).collect();
        Ok(Gradients { tape_id: self.id, grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, delta: &[f64]) {
    match &mut grads[id] {
        Some(g) => axpy(g, delta, 1.0),
        slot => *slot = Some(delta.to_vec()),
    }
}

// ───────────────────────────── gradients ─────────────────────────────

pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tensor registered on the tape.
    /// A node the loss never touched gets an all-zero gradient.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let id = match t.node {
            Some((tape, id)) if tape == self.tape_id => id,
            _ => return Err(Error::NotOnTape),
        };
        let (rows, cols) = self.shapes[id];
        match &self.grads[id] {
            Some(g) => Tensor::new(rows, cols, g.clone()),
            None => Ok(Tensor::zeros(rows, cols)),
        }
    }
}

// ───────────────────────────── gradient check ─────────────────────────────

/// Max over all parameter entries of |g_ad - g_fd| / max(1, |g_fd|), with
/// g_fd from central differences at step h. The loss builder must be
/// deterministic in its parameters.
pub fn grad_check<F>(build: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(Error::InvalidRange(format!("h must be positive, got {h}")));
    }
    if params.is_empty() {
        return Ok(0.0);
    }

    let tape = Tape::new();
    let leaves: Vec<Tensor> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&tape, &leaves)?;
    let grads = tape.backward(&loss)?;
    let ad: Vec<Tensor> = leaves.iter().map(|l| grads.wrt(l)).collect::<Result<_>>()?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let t = Tape::inactive();
        Ok(build(&t, ps)?.item())
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = params.iter().map(|p| p.detach()).collect();
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let orig = probe[pi].data[e];
            probe[pi].data[e] = orig + h;
            let up = eval(&probe)?;
            probe[pi].data[e] = orig - h;
            let down = eval(&probe)?;
            probe[pi].data[e] = orig;
            let fd = (up - down) / (2.0 * h);
            if !fd.is_finite() {
                return Err(Error::NonFiniteValue { op: "grad_check" });
            }
            let err = (ad[pi].data[e] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

// ───────────────────────────── tests ─────────────────────────────
