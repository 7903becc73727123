//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`GradTape`] owns an append-only list of nodes. Each node stores the
//! forward value and the primitive that produced it, so node indices are
//! already a topological order and the backward sweep is a single reverse
//! pass distributing adjoints to parents.
//!
//! Backward-call policy: a tape permits exactly one [`GradTape::backward`]
//! call. A second call is rejected with a contract error — build a fresh
//! tape (they are cheap) instead of re-running a consumed one. Within the
//! one permitted call, every leaf receives exactly one accumulated gradient;
//! leaves unreachable from the root (and all constants) report zeros.
//!
//! Values are immutable once recorded. A tape must stay confined to a single
//! thread; parallelism across batch elements uses one tape per element.

use std::cell::{Cell, RefCell};
use std::ops::Range;

use super::kernels;
use super::Tensor;
use crate::error::{dim_error, Error, Result};

/// Recorded primitive. Indices refer to parent nodes on the same tape.
#[derive(Debug, Clone)]
enum Op {
    /// Trainable input: receives a gradient.
    Leaf,
    /// Non-trainable input or detached value: blocks gradient flow.
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    /// Elementwise product with a rank-0 node, e.g. dividing by a computed mean.
    MulScalarVar(usize, usize),
    Recip(usize),
    Matmul(usize, usize),
    /// a · bᵀ without materializing the transpose.
    MatmulNT(usize, usize),
    Transpose(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Silu(usize),
    MaxScalar(usize, f64),
    Sum(usize),
    Mean(usize),
    /// Matrix plus a length-`cols` vector added to every row.
    AddRow(usize, usize),
    /// Matrix plus a length-`rows` vector added to every column.
    AddCol(usize, usize),
    /// Per-row log(Σ exp), max-shifted.
    LseRows(usize),
    LseCols(usize),
    SoftmaxRows(usize),
    L2NormRows { x: usize, floor: f64 },
    /// Euclidean norm of each row.
    RowNorms(usize),
    RmsNormRows { x: usize, eps: f64 },
    /// C[i][j] = ‖a_i − b_j‖².
    PairSqDist(usize, usize),
    /// D[i][j] = ‖x_i − x_j‖ within one matrix.
    PairDist(usize),
    Outer(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, range: Range<usize> },
    /// Mean binary cross-entropy from logits against constant targets.
    BceLogits { z: usize, targets: Tensor },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MulScalarVar(a, b)
            | Op::Matmul(a, b)
            | Op::MatmulNT(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b)
            | Op::PairSqDist(a, b)
            | Op::Outer(a, b) => vec![*a, *b],
            Op::AddScalar(a)
            | Op::Scale(a, _)
            | Op::Recip(a)
            | Op::Transpose(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Silu(a)
            | Op::MaxScalar(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LseRows(a)
            | Op::LseCols(a)
            | Op::SoftmaxRows(a)
            | Op::L2NormRows { x: a, .. }
            | Op::RowNorms(a)
            | Op::RmsNormRows { x: a, .. }
            | Op::PairDist(a)
            | Op::SliceCols { x: a, .. }
            | Op::BceLogits { z: a, .. } => vec![*a],
            Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape for one forward/backward episode.
#[derive(Default)]
pub struct GradTape {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

/// Handle to a node on a [`GradTape`]. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t GradTape,
    index: usize,
}

/// Per-leaf gradients produced by one backward sweep.
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    adj: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`. Zeros when `v` is
    /// a constant or unreachable from the root.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.adj.get(v.index).and_then(|s| s.as_ref()) {
            Some(buf) => Tensor::from_parts(self.shapes[v.index].clone(), buf.clone()),
            None => Tensor::zeros(&self.shapes.get(v.index).cloned().unwrap_or_default()),
        }
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            other => {
                let nodes = self.nodes.borrow();
                other.parents().iter().any(|&p| nodes[p].needs_grad)
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            index: nodes.len() - 1,
        }
    }

    /// Register a trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Register a non-trainable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant)
    }

    /// Concatenate rank-2 nodes along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Input("concat_cols of zero parts".into()));
        }
        for p in parts {
            p.same_tape(self)?;
        }
        let nodes = self.nodes.borrow();
        let rows = nodes[parts[0].index].value.shape()[0];
        let mut cols = 0;
        for p in parts {
            let sh = nodes[p.index].value.shape();
            if sh.len() != 2 || sh[0] != rows {
                return Err(dim_error("concat_cols", &[rows, 0], sh));
            }
            cols += sh[1];
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for p in parts {
            let v = &nodes[p.index].value;
            let w = v.cols();
            for i in 0..rows {
                data[i * cols + offset..i * cols + offset + w].copy_from_slice(v.row(i));
            }
            offset += w;
        }
        drop(nodes);
        let out = Tensor::from_parts(vec![rows, cols], data);
        out.ensure_finite("concat_cols")?;
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.index).collect())))
    }

    /// Reverse sweep from `root`, which must hold exactly one element.
    ///
    /// Only one call per tape is allowed; see the module docs.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        root.same_tape(self)?;
        if self.backward_done.replace(true) {
            return Err(Error::Contract(
                "backward already called on this tape; record a fresh tape per episode".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[root.index].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.index].value.shape()
            )));
        }

        let n = root.index + 1;
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if nodes[root.index].needs_grad {
            adj[root.index] = Some(vec![1.0]);
        }

        for i in (0..n).rev() {
            if adj[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            let (lower, upper) = adj.split_at_mut(i);
            let g = upper[0].as_ref().unwrap();
            backprop_node(&nodes, i, g, lower);
        }

        let shapes = nodes.iter().take(n).map(|nd| nd.value.shape().to_vec()).collect();
        drop(nodes);
        Ok(Gradients { shapes, adj })
    }
}

/// Ensure an adjoint buffer exists for `idx` (when that node wants gradients)
/// and return it.
fn slot<'a>(
    nodes: &[Node],
    lower: &'a mut [Option<Vec<f64>>],
    idx: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[idx].needs_grad {
        return None;
    }
    let numel = nodes[idx].value.numel();
    Some(lower[idx].get_or_insert_with(|| vec![0.0; numel]))
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Distribute the adjoint `g` of node `i` to its parents.
fn backprop_node(nodes: &[Node], i: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
    let val = |idx: usize| -> &Tensor { &nodes[idx].value };
    let out = val(i);
    match &nodes[i].op {
        Op::Leaf | Op::Constant => {}

        Op::Add(a, b) => {
            if let Some(da) = slot(nodes, lower, *a) {
                add_assign(da, g);
            }
            if let Some(db) = slot(nodes, lower, *b) {
                add_assign(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, lower, *a) {
                add_assign(da, g);
            }
            if let Some(db) = slot(nodes, lower, *b) {
                for (d, s) in db.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data().to_vec(), val(*b).data().to_vec());
            if let Some(da) = slot(nodes, lower, *a) {
                for ((d, s), x) in da.iter_mut().zip(g).zip(&vb) {
                    *d += s * x;
                }
            }
            if let Some(db) = slot(nodes, lower, *b) {
                for ((d, s), x) in db.iter_mut().zip(g).zip(&va) {
                    *d += s * x;
                }
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a).data().to_vec(), val(*b).data().to_vec());
            if let Some(da) = slot(nodes, lower, *a) {
                for ((d, s), x) in da.iter_mut().zip(g).zip(&vb) {
                    *d += s / x;
                }
            }
            if let Some(db) = slot(nodes, lower, *b) {
                for i in 0..db.len() {
                    db[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                }
            }
        }
        Op::AddScalar(a) => {
            if let Some(da) = slot(nodes, lower, *a) {
                add_assign(da, g);
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            if let Some(da) = slot(nodes, lower, *a) {
                for (d, s) in da.iter_mut().zip(g) {
                    *d += s * c;
                }
            }
        }
        Op::MulScalarVar(a, s) => {
            let sval = val(*s).data()[0];
            let va = val(*a).data().to_vec();
            if let Some(da) = slot(nodes, lower, *a) {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv * sval;
                }
            }
            if let Some(ds) = slot(nodes, lower, *s) {
                ds[0] += g.iter().zip(&va).map(|(gv, xv)| gv * xv).sum::<f64>();
            }
        }
        Op::Recip(a) => {
            let y = out.data();
            if let Some(da) = slot(nodes, lower, *a) {
                for i in 0..da.len() {
                    da[i] -= g[i] * y[i] * y[i];
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            let (va, vb) = (val(*a).data(), val(*b).data());
            let da_new = kernels::matmul_nt(g, m, n, vb, k);
            let db_new = kernels::matmul_tn(va, m, k, g, n);
            if let Some(da) = slot(nodes, lower, *a) {
                add_assign(da, &da_new);
            }
            if let Some(db) = slot(nodes, lower, *b) {
                add_assign(db, &db_new);
            }
        }
        Op::MatmulNT(a, b) => {
            // y = a bᵀ with a: m×k, b: n×k, y: m×n.
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).rows();
            let (va, vb) = (val(*a).data(), val(*b).data());
            let da_new = kernels::matmul(g, m, n, vb, k);
            let db_new = kernels::matmul_tn(g, m, n, va, k);
            if let Some(da) = slot(nodes, lower, *a) {
                add_assign(da, &da_new);
            }
            if let Some(db) = slot(nodes, lower, *b) {
                add_assign(db, &db_new);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (val(*a).rows(), val(*a).cols());
            if let Some(da) = slot(nodes, lower, *a) {
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] += g[i * m + j];
                    }
                }
            }
        }
        Op::Exp(a) => {
            let y = out.data();
            if let Some(da) = slot(nodes, lower, *a) {
                for i in 0..da.len() {
                    da[i] += g[i] * y[i];
                }
            }
        }
        Op::Ln(a) => {
            let x = val(*a).data();
            if let Some(da) = slot(nodes, lower, *a) {
                for i in 0..da.len() {
                    da[i] += g[i] / x[i];
                }
            }
        }
        Op::Sqrt(a) => {
            let y = out.data();
            if let Some(da) = slot(nodes, lower, *a) {
                for i in 0..da.len() {
                    da[i] += g[i] * 0.5 / y[i];
                }
            }
        }
        Op::Silu(a) => {
            let x = val(*a).data();
            if let Some(da) = slot(nodes, lower, *a) {
                for i in 0..da.len() {
                    let s = kernels::sigmoid(x[i]);
                    da[i] += g[i] * (s + x[i] * s * (1.0 - s));
                }
            }
        }
        Op::MaxScalar(a, c) => {
            let x = val(*a).data();
            let c = *c;
            if let Some(da) = slot(nodes, lower, *a) {
                for i in 0..da.len() {
                    if x[i] > c {
                        da[i] += g[i];
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(nodes, lower, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(a) => {
            let n = val(*a).numel() as f64;
            if let Some(da) = slot(nodes, lower, *a) {
                for d in da.iter_mut() {
                    *d += g[0] / n;
                }
            }
        }
        Op::AddRow(a, r) => {
            let (m, n) = (val(*a).rows(), val(*a).cols());
            if let Some(da) = slot(nodes, lower, *a) {
                add_assign(da, g);
            }
            if let Some(dr) = slot(nodes, lower, *r) {
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += g[i * n + j];
                    }
                }
            }
        }
        Op::AddCol(a, c) => {
            let (m, n) = (val(*a).rows(), val(*a).cols());
            if let Some(da) = slot(nodes, lower, *a) {
                add_assign(da, g);
            }
            if let Some(dc) = slot(nodes, lower, *c) {
                for i in 0..m {
                    for j in 0..n {
                        dc[i] += g[i * n + j];
                    }
                }
            }
        }
        Op::LseRows(a) => {
            let x = val(*a);
            let (m, n) = (x.rows(), x.cols());
            let y = out.data();
            if let Some(da) = slot(nodes, lower, *a) {
                for i in 0..m {
                    let row = x.row(i);
                    for j in 0..n {
                        da[i * n + j] += g[i] * (row[j] - y[i]).exp();
                    }
                }
            }
        }
        Op::LseCols(a) => {
            let x = val(*a);
            let (m, n) = (x.rows(), x.cols());
            let y = out.data();
            if let Some(da) = slot(nodes, lower, *a) {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += g[j] * (x.data()[i * n + j] - y[j]).exp();
                    }
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let y = out;
            let (m, n) = (y.rows(), y.cols());
            if let Some(da) = slot(nodes, lower, *a) {
                for i in 0..m {
                    let yrow = y.row(i);
                    let grow = &g[i * n..(i + 1) * n];
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        da[i * n + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::L2NormRows { x, floor } => {
            let xv = val(*x);
            let (m, n) = (xv.rows(), xv.cols());
            if let Some(da) = slot(nodes, lower, *x) {
                for i in 0..m {
                    let row = xv.row(i);
                    let grow = &g[i * n..(i + 1) * n];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < *floor {
                        for j in 0..n {
                            da[i * n + j] += grow[j] / floor;
                        }
                    } else {
                        let yrow = out.row(i);
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            da[i * n + j] += (grow[j] - yrow[j] * dot) / norm;
                        }
                    }
                }
            }
        }
        Op::RowNorms(a) => {
            let x = val(*a);
            let (m, n) = (x.rows(), x.cols());
            let y = out.data();
            if let Some(da) = slot(nodes, lower, *a) {
                for i in 0..m {
                    if y[i] == 0.0 {
                        continue;
                    }
                    let row = x.row(i);
                    for j in 0..n {
                        da[i * n + j] += g[i] * row[j] / y[i];
                    }
                }
            }
        }
        Op::RmsNormRows { x, eps } => {
            let xv = val(*x);
            let (m, n) = (xv.rows(), xv.cols());
            if let Some(da) = slot(nodes, lower, *x) {
                for i in 0..m {
                    let row = xv.row(i);
                    let grow = &g[i * n..(i + 1) * n];
                    let msq = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    let r = (msq + eps).sqrt();
                    let s: f64 = grow.iter().zip(row).map(|(gv, xv)| gv * xv).sum();
                    let coef = s / (n as f64 * r * r * r);
                    for j in 0..n {
                        da[i * n + j] += grow[j] / r - row[j] * coef;
                    }
                }
            }
        }
        Op::PairSqDist(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, d) = (ta.rows(), ta.cols());
            let n = tb.rows();
            if let Some(da) = slot(nodes, lower, *a) {
                for i in 0..m {
                    let ai = ta.row(i);
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let bj = tb.row(j);
                        for p in 0..d {
                            da[i * d + p] += gv * 2.0 * (ai[p] - bj[p]);
                        }
                    }
                }
            }
            if let Some(db) = slot(nodes, lower, *b) {
                for i in 0..m {
                    let ai = ta.row(i);
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let bj = tb.row(j);
                        for p in 0..d {
                            db[j * d + p] += gv * 2.0 * (bj[p] - ai[p]);
                        }
                    }
                }
            }
        }
        Op::PairDist(a) => {
            let x = val(*a);
            let (m, d) = (x.rows(), x.cols());
            let y = out.data();
            if let Some(da) = slot(nodes, lower, *a) {
                for i in 0..m {
                    for j in 0..m {
                        if i == j {
                            continue;
                        }
                        let dist = y[i * m + j];
                        if dist < 1e-300 {
                            continue; // subgradient 0 at coincident rows
                        }
                        let gv = g[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let (xi, xj) = (x.row(i), x.row(j));
                        for p in 0..d {
                            let u = (xi[p] - xj[p]) / dist;
                            da[i * d + p] += gv * u;
                            da[j * d + p] -= gv * u;
                        }
                    }
                }
            }
        }
        Op::Outer(u, v) => {
            let (tu, tv) = (val(*u), val(*v));
            let (m, n) = (tu.numel(), tv.numel());
            if let Some(du) = slot(nodes, lower, *u) {
                for i in 0..m {
                    du[i] += (0..n).map(|j| g[i * n + j] * tv.data()[j]).sum::<f64>();
                }
            }
            if let Some(dv) = slot(nodes, lower, *v) {
                for j in 0..n {
                    dv[j] += (0..m).map(|i| g[i * n + i * 0 + j] * tu.data()[i]).sum::<f64>();
                }
            }
        }
        Op::ConcatCols(parts) => {
            let rows = out.rows();
            let cols = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(dp) = slot(nodes, lower, p) {
                    for i in 0..rows {
                        for j in 0..w {
                            dp[i * w + j] += g[i * cols + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols { x, range } => {
            let xv = val(*x);
            let (m, n) = (xv.rows(), xv.cols());
            let w = range.len();
            if let Some(dx) = slot(nodes, lower, *x) {
                for i in 0..m {
                    for j in 0..w {
                        dx[i * n + range.start + j] += g[i * w + j];
                    }
                }
            }
        }
        Op::BceLogits { z, targets } => {
            let zv = val(*z);
            let n = zv.numel() as f64;
            if let Some(dz) = slot(nodes, lower, *z) {
                for i in 0..dz.len() {
                    let s = kernels::sigmoid(zv.data()[i]);
                    dz[i] += g[0] * (s - targets.data()[i]) / n;
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    fn same_tape(&self, tape: &GradTape) -> Result<()> {
        if std::ptr::eq(self.tape, tape) {
            Ok(())
        } else {
            Err(Error::Contract(
                "variables belong to different tapes".into(),
            ))
        }
    }

    fn node_value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.index].value.clone()
    }

    /// Forward value of this node (cheap: storage is shared).
    pub fn value(&self) -> Tensor {
        self.node_value()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.index].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.node_value().item()
    }

    /// Re-register the value as a constant, cutting gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.node_value())
    }

    fn unary(&self, op: Op, value: Tensor, name: &'static str) -> Result<Var<'t>> {
        value.ensure_finite(name)?;
        Ok(self.tape.push(value, op))
    }

    fn binary(&self, other: Var<'t>, op: Op, value: Tensor, name: &'static str) -> Result<Var<'t>> {
        other.same_tape(self.tape)?;
        value.ensure_finite(name)?;
        Ok(self.tape.push(value, op))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.node_value().add(&other.node_value())?;
        self.binary(other, Op::Add(self.index, other.index), v, "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.node_value().sub(&other.node_value())?;
        self.binary(other, Op::Sub(self.index, other.index), v, "sub")
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.node_value().mul(&other.node_value())?;
        self.binary(other, Op::Mul(self.index, other.index), v, "mul")
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.node_value().zip_div(&other.node_value())?;
        self.binary(other, Op::Div(self.index, other.index), v, "div")
    }

    pub fn sqr(&self) -> Result<Var<'t>> {
        self.mul(*self)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        let v = self.node_value().map(|x| x + c)?;
        self.unary(Op::AddScalar(self.index), v, "add_scalar")
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let v = self.node_value().scale(c)?;
        self.unary(Op::Scale(self.index, c), v, "scale")
    }

    /// Multiply every element by a rank-0 node.
    pub fn mul_scalar_var(&self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.node_value();
        if sv.numel() != 1 {
            return Err(dim_error("mul_scalar_var", &self.shape(), sv.shape()));
        }
        let v = self.node_value().scale(sv.item()?)?;
        self.binary(s, Op::MulScalarVar(self.index, s.index), v, "mul_scalar_var")
    }

    pub fn recip(&self) -> Result<Var<'t>> {
        let v = self.node_value().map(|x| 1.0 / x)?;
        self.unary(Op::Recip(self.index), v, "recip")
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.node_value().matmul(&other.node_value())?;
        self.binary(other, Op::Matmul(self.index, other.index), v, "matmul")
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.node_value(), other.node_value());
        if !a.is_matrix() || !b.is_matrix() || a.cols() != b.cols() {
            return Err(dim_error("matmul_nt", a.shape(), b.shape()));
        }
        let out = kernels::matmul_nt(a.data(), a.rows(), a.cols(), b.data(), b.rows());
        let v = Tensor::from_parts(vec![a.rows(), b.rows()], out);
        self.binary(other, Op::MatmulNT(self.index, other.index), v, "matmul_nt")
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.node_value().transpose()?;
        self.unary(Op::Transpose(self.index), v, "transpose")
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        let v = self.node_value().map(f64::exp)?;
        self.unary(Op::Exp(self.index), v, "exp")
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        let v = self.node_value().map(f64::ln)?;
        self.unary(Op::Ln(self.index), v, "ln")
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        let v = self.node_value().map(f64::sqrt)?;
        self.unary(Op::Sqrt(self.index), v, "sqrt")
    }

    pub fn silu(&self) -> Result<Var<'t>> {
        let v = self.node_value().map(|x| x * kernels::sigmoid(x))?;
        self.unary(Op::Silu(self.index), v, "silu")
    }

    pub fn max_scalar(&self, c: f64) -> Result<Var<'t>> {
        let v = self.node_value().map(|x| x.max(c))?;
        self.unary(Op::MaxScalar(self.index, c), v, "max_scalar")
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let v = Tensor::from_parts(vec![], vec![self.node_value().sum()]);
        self.unary(Op::Sum(self.index), v, "sum")
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = Tensor::from_parts(vec![], vec![self.node_value().mean()]);
        self.unary(Op::Mean(self.index), v, "mean")
    }

    /// Add a length-`cols` vector to every row of a matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (x, r) = (self.node_value(), row.node_value());
        if !x.is_matrix() || r.rank() != 1 || r.numel() != x.cols() {
            return Err(dim_error("add_row", x.shape(), r.shape()));
        }
        let (m, n) = (x.rows(), x.cols());
        let mut data = x.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r.data()[j];
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        self.binary(row, Op::AddRow(self.index, row.index), v, "add_row")
    }

    /// Add a length-`rows` vector to every column of a matrix.
    pub fn add_col(&self, col: Var<'t>) -> Result<Var<'t>> {
        let (x, c) = (self.node_value(), col.node_value());
        if !x.is_matrix() || c.rank() != 1 || c.numel() != x.rows() {
            return Err(dim_error("add_col", x.shape(), c.shape()));
        }
        let (m, n) = (x.rows(), x.cols());
        let mut data = x.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += c.data()[i];
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        self.binary(col, Op::AddCol(self.index, col.index), v, "add_col")
    }

    /// Per-row log-sum-exp of a matrix, returning a vector of length `rows`.
    pub fn lse_rows(&self) -> Result<Var<'t>> {
        let x = self.node_value();
        if !x.is_matrix() {
            return Err(Error::Input(format!(
                "lse_rows requires a matrix, got {:?}",
                x.shape()
            )));
        }
        let data: Vec<f64> = (0..x.rows()).map(|i| kernels::logsumexp(x.row(i))).collect();
        let v = Tensor::from_parts(vec![x.rows()], data);
        self.unary(Op::LseRows(self.index), v, "lse_rows")
    }

    /// Per-column log-sum-exp of a matrix, returning a vector of length `cols`.
    pub fn lse_cols(&self) -> Result<Var<'t>> {
        let x = self.node_value();
        if !x.is_matrix() {
            return Err(Error::Input(format!(
                "lse_cols requires a matrix, got {:?}",
                x.shape()
            )));
        }
        let (m, n) = (x.rows(), x.cols());
        let mut data = vec![0.0; n];
        let mut col = vec![0.0; m];
        for j in 0..n {
            for i in 0..m {
                col[i] = x.data()[i * n + j];
            }
            data[j] = kernels::logsumexp(&col);
        }
        let v = Tensor::from_parts(vec![n], data);
        self.unary(Op::LseCols(self.index), v, "lse_cols")
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let v = self.node_value().softmax_rows()?;
        self.unary(Op::SoftmaxRows(self.index), v, "softmax_rows")
    }

    pub fn l2_normalize_rows(&self, floor: f64) -> Result<Var<'t>> {
        let v = self.node_value().l2_normalize_rows(floor)?;
        self.unary(Op::L2NormRows { x: self.index, floor }, v, "l2_normalize_rows")
    }

    /// Euclidean norm of each row, returning a vector of length `rows`.
    pub fn row_norms(&self) -> Result<Var<'t>> {
        let x = self.node_value();
        if !x.is_matrix() {
            return Err(Error::Input(format!(
                "row_norms requires a matrix, got {:?}",
                x.shape()
            )));
        }
        let data: Vec<f64> = (0..x.rows())
            .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let v = Tensor::from_parts(vec![x.rows()], data);
        self.unary(Op::RowNorms(self.index), v, "row_norms")
    }

    /// Per-row RMS normalization: `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm_rows(&self, eps: f64) -> Result<Var<'t>> {
        let x = self.node_value();
        if !x.is_matrix() {
            return Err(Error::Input(format!(
                "rms_norm_rows requires a matrix, got {:?}",
                x.shape()
            )));
        }
        let (m, n) = (x.rows(), x.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = x.row(i);
            let r = (row.iter().map(|v| v * v).sum::<f64>() / n as f64 + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = row[j] / r;
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        self.unary(Op::RmsNormRows { x: self.index, eps }, v, "rms_norm_rows")
    }

    /// All pairwise squared Euclidean distances between rows of `self` and
    /// rows of `other`.
    pub fn pairwise_sqdist(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.node_value(), other.node_value());
        if !a.is_matrix() || !b.is_matrix() || a.cols() != b.cols() {
            return Err(dim_error("pairwise_sqdist", a.shape(), b.shape()));
        }
        let (m, n) = (a.rows(), b.rows());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let ai = a.row(i);
            for j in 0..n {
                let bj = b.row(j);
                data[i * n + j] = ai
                    .iter()
                    .zip(bj)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
        }
        let v = Tensor::from_parts(vec![m, n], data);
        self.binary(
            other,
            Op::PairSqDist(self.index, other.index),
            v,
            "pairwise_sqdist",
        )
    }

    /// Pairwise Euclidean distances between rows of one matrix (zero diagonal).
    pub fn pairwise_dist(&self) -> Result<Var<'t>> {
        let x = self.node_value();
        if !x.is_matrix() {
            return Err(Error::Input(format!(
                "pairwise_dist requires a matrix, got {:?}",
                x.shape()
            )));
        }
        let m = x.rows();
        let mut data = vec![0.0; m * m];
        for i in 0..m {
            for j in (i + 1)..m {
                let d = x
                    .row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                data[i * m + j] = d;
                data[j * m + i] = d;
            }
        }
        let v = Tensor::from_parts(vec![m, m], data);
        self.unary(Op::PairDist(self.index), v, "pairwise_dist")
    }

    /// Outer product of two vectors.
    pub fn outer(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (u, v) = (self.node_value(), other.node_value());
        if u.rank() != 1 || v.rank() != 1 {
            return Err(dim_error("outer", u.shape(), v.shape()));
        }
        let (m, n) = (u.numel(), v.numel());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = u.data()[i] * v.data()[j];
            }
        }
        let t = Tensor::from_parts(vec![m, n], data);
        self.binary(other, Op::Outer(self.index, other.index), t, "outer")
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.node_value();
        if !x.is_matrix() || start + len > x.cols() {
            return Err(Error::Input(format!(
                "slice_cols {start}..{} out of range for shape {:?}",
                start + len,
                x.shape()
            )));
        }
        let m = x.rows();
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&x.row(i)[start..start + len]);
        }
        let v = Tensor::from_parts(vec![m, len], data);
        self.unary(
            Op::SliceCols {
                x: self.index,
                range: start..start + len,
            },
            v,
            "slice_cols",
        )
    }

    /// Mean binary cross-entropy from logits against constant 0/1 targets.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Var<'t>> {
        let z = self.node_value();
        if z.shape() != targets.shape() {
            return Err(dim_error("bce_with_logits", z.shape(), targets.shape()));
        }
        let n = z.numel() as f64;
        let loss = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&zv, &t)| kernels::softplus(zv) - t * zv)
            .sum::<f64>()
            / n;
        let v = Tensor::from_parts(vec![], vec![loss]);
        self.unary(
            Op::BceLogits {
                z: self.index,
                targets: targets.clone(),
            },
            v,
            "bce_with_logits",
        )
    }
}

impl Tensor {
    /// Elementwise division used by the tape (kept here so kernels stay in
    /// one module).
    pub(crate) fn zip_div(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(dim_error("div", self.shape(), other.shape()));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a / b)
            .collect();
        let t = Tensor::from_parts(self.shape().to_vec(), data);
        t.ensure_finite("div")?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = GradTape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let loss = x.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        let tape = GradTape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
        let loss = x.sqr().unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constant_graph_has_zero_gradient() {
        let tape = GradTape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::vector(vec![5.0, 6.0]).unwrap());
        let loss = c.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = GradTape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn second_backward_rejected() {
        let tape = GradTape::new();
        let x = tape.leaf(Tensor::scalar(2.0).unwrap());
        let loss = x.sqr().unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = GradTape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let d = x.detach();
        let loss = d.sqr().unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn mixed_tapes_rejected() {
        let t1 = GradTape::new();
        let t2 = GradTape::new();
        let a = t1.leaf(Tensor::scalar(1.0).unwrap());
        let b = t2.leaf(Tensor::scalar(2.0).unwrap());
        assert!(a.add(b).is_err());
    }

    #[test]
    fn matmul_grads_match_hand_derivation() {
        // loss = sum(A·B) → dA = 1·Bᵀ broadcast, dB = Aᵀ·1.
        let tape = GradTape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let loss = a.matmul(b).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.wrt(b).data(), &[4.0, 4.0, 6.0, 6.0]);
    }
}
