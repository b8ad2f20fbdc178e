//! Tape of dense-tensor operations with reverse-mode gradients.
//!
//! A [`Graph`] records every forward operation together with its result.
//! [`Graph::backward`] walks the tape in reverse and accumulates the
//! gradient of a scalar root into the [`ParamStore`] entries that were
//! pulled into the graph with [`Graph::param`].

use std::collections::HashMap;

use super::tensor::{gemm, Strided};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// `acos` passes no gradient where `|x| > 1 - ACOS_CLAMP`, keeping it finite.
pub const ACOS_CLAMP: f64 = 1e-7;
/// Inputs to `acos` beyond `1 + ACOS_DOMAIN_SLACK` in magnitude are domain errors.
const ACOS_DOMAIN_SLACK: f64 = 1e-6;

/// Handle of a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Prelu(Var, Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    L1(Var),
    L2(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Acos(Var),
    AddRow(Var, Var),
    RowSums(Var),
    RowL1(Var),
    Reshape(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    GatherCols { x: Var, idx: Vec<usize> },
    BlockMatMul { a: Var, x: Var, blocks: usize },
    BlockTranspose { x: Var, blocks: usize },
    NormalizeGroups { x: Var, group: usize, eps: f64 },
    GroupNorms { x: Var, group: usize },
    Cross3(Var, Var),
    MinRows { x: Var, argmin: Vec<usize> },
    PairwiseSqDist { x: Var, targets: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a root with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// A single forward computation. Build a new graph per evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn require_matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if !a.is_matrix() {
        return Err(Error::dim(op, format!("expected a matrix, got {:?}", a.shape())));
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::gradients`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Pulls a parameter into the graph; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    /// `max(x, 0) + slope · min(x, 0)` with a single-element `slope`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).len() != 1 {
            return Err(Error::dim(
                "prelu",
                format!("slope must hold one value, got {:?}", self.value(slope).shape()),
            ));
        }
        let s = self.value(slope).item();
        let value = self.value(x).map(|v| if v > 0.0 { v } else { s * v });
        let ng = self.ng(x) || self.ng(slope);
        Ok(self.push(value, Op::Prelu(x, slope), ng))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Log(a), ng))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let value = Tensor::scalar(self.value(a).sum() / n as f64);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Mean(a), ng))
    }

    pub fn l1_norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().map(|v| v.abs()).sum());
        let ng = self.ng(a);
        self.push(value, Op::L1(a), ng)
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().map(|v| v * v).sum::<f64>().sqrt());
        let ng = self.ng(a);
        self.push(value, Op::L2(a), ng)
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::dim("concat", "needs at least one part and axis 0 or 1"));
        }
        for &p in parts {
            require_matrix("concat", self.value(p))?;
        }
        let first = self.value(parts[0]);
        let value = if axis == 0 {
            let cols = first.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let t = self.value(p);
                if t.cols() != cols {
                    return Err(Error::dim("concat", format!("column mismatch {} vs {cols}", t.cols())));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, cols, data)
        } else {
            let rows = first.rows();
            let mut cols = 0;
            for &p in parts {
                let t = self.value(p);
                if t.rows() != rows {
                    return Err(Error::dim("concat", format!("row mismatch {} vs {rows}", t.rows())));
                }
                cols += t.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::matrix(rows, cols, data)
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Rows (`axis = 0`) or columns (`axis = 1`) in `start..end`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        require_matrix("slice", t)?;
        let extent = if axis == 0 { t.rows() } else { t.cols() };
        if axis > 1 || start > end || end > extent {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", t.shape()),
            ));
        }
        let value = if axis == 0 {
            t.slice_rows(start, end)
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(t.rows() * w);
            for r in 0..t.rows() {
                data.extend_from_slice(&t.row(r)[start..end]);
            }
            Tensor::matrix(t.rows(), w, data)
        };
        let ng = self.ng(x);
        Ok(self.push(value, Op::Slice { x, axis, start }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        require_matrix("transpose", self.value(x))?;
        let value = self.value(x).transpose();
        let ng = self.ng(x);
        Ok(self.push(value, Op::Transpose(x), ng))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.ng(x);
        self.push(value, Op::Clamp { x, lo, hi }, ng)
    }

    /// `acos` of inputs clamped to `[-1, 1]`; see [`ACOS_CLAMP`] for the gradient.
    pub fn acos(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self
            .value(x)
            .data()
            .iter()
            .find(|v| !(v.abs() <= 1.0 + ACOS_DOMAIN_SLACK))
        {
            return Err(Error::Domain {
                op: "acos",
                detail: format!("input {bad} outside [-1, 1]"),
            });
        }
        let value = self.value(x).map(|v| v.clamp(-1.0, 1.0).acos());
        let ng = self.ng(x);
        Ok(self.push(value, Op::Acos(x), ng))
    }

    /// Adds a `1 × C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (t, r) = (self.value(x), self.value(row));
        require_matrix("add_row", t)?;
        if r.rows() != 1 || r.cols() != t.cols() {
            return Err(Error::dim("add_row", format!("{:?} + row {:?}", t.shape(), r.shape())));
        }
        let c = t.cols();
        let mut value = t.clone();
        for chunk in value.data_mut().chunks_mut(c) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(value, Op::AddRow(x, row), ng))
    }

    /// Per-row sums as an `R × 1` column.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        require_matrix("row_sums", t)?;
        let value = Tensor::matrix(
            t.rows(),
            1,
            (0..t.rows()).map(|r| t.row(r).iter().sum()).collect(),
        );
        let ng = self.ng(x);
        Ok(self.push(value, Op::RowSums(x), ng))
    }

    /// Per-row L1 norms as an `R × 1` column.
    pub fn row_l1(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        require_matrix("row_l1", t)?;
        let value = Tensor::matrix(
            t.rows(),
            1,
            (0..t.rows())
                .map(|r| t.row(r).iter().map(|v| v.abs()).sum())
                .collect(),
        );
        let ng = self.ng(x);
        Ok(self.push(value, Op::RowL1(x), ng))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).reshaped(rows, cols)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Selects (and possibly repeats) rows of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        require_matrix("gather_rows", t)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {:?}", t.shape())));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(idx.len(), c, data);
        let ng = self.ng(x);
        Ok(self.push(value, Op::GatherRows { x, idx }, ng))
    }

    /// Selects (and possibly repeats) columns of `x`.
    pub fn gather_cols(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        require_matrix("gather_cols", t)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.cols()) {
            return Err(Error::dim("gather_cols", format!("column {bad} of {:?}", t.shape())));
        }
        let mut data = Vec::with_capacity(idx.len() * t.rows());
        for r in 0..t.rows() {
            let row = t.row(r);
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let value = Tensor::matrix(t.rows(), idx.len(), data);
        let ng = self.ng(x);
        Ok(self.push(value, Op::GatherCols { x, idx }, ng))
    }

    /// Left-multiplies each of the `blocks` row blocks of `x` by `a`:
    /// `x` is `(blocks·q) × C`, `a` is `p × q`, the result `(blocks·p) × C`.
    pub fn block_matmul(&mut self, a: Var, x: Var, blocks: usize) -> Result<Var> {
        let (ta, tx) = (self.value(a), self.value(x));
        require_matrix("block_matmul", ta)?;
        require_matrix("block_matmul", tx)?;
        let (p, q, c) = (ta.rows(), ta.cols(), tx.cols());
        if blocks == 0 || tx.rows() != blocks * q {
            return Err(Error::dim(
                "block_matmul",
                format!("{:?} applied to {blocks} blocks of {:?}", ta.shape(), tx.shape()),
            ));
        }
        let mut out = vec![0.0; blocks * p * c];
        for b in 0..blocks {
            gemm(
                p,
                q,
                c,
                1.0,
                Strided::row_major(ta.data(), q),
                Strided::row_major(&tx.data()[b * q * c..(b + 1) * q * c], c),
                0.0,
                &mut out[b * p * c..(b + 1) * p * c],
            );
        }
        let value = Tensor::matrix(blocks * p, c, out);
        let ng = self.ng(a) || self.ng(x);
        Ok(self.push(value, Op::BlockMatMul { a, x, blocks }, ng))
    }

    /// Transposes each of the `blocks` row blocks: `(B·R) × C` → `(B·C) × R`.
    pub fn block_transpose(&mut self, x: Var, blocks: usize) -> Result<Var> {
        let t = self.value(x);
        require_matrix("block_transpose", t)?;
        if blocks == 0 || t.rows() % blocks != 0 {
            return Err(Error::dim(
                "block_transpose",
                format!("{:?} into {blocks} blocks", t.shape()),
            ));
        }
        let value = block_transpose_raw(t, blocks);
        let ng = self.ng(x);
        Ok(self.push(value, Op::BlockTranspose { x, blocks }, ng))
    }

    /// Scales every consecutive group of `group` columns to unit L2 norm,
    /// dividing by `max(norm, eps)`.
    pub fn normalize_groups(&mut self, x: Var, group: usize, eps: f64) -> Result<Var> {
        let t = self.value(x);
        require_matrix("normalize_groups", t)?;
        if group == 0 || t.cols() % group != 0 {
            return Err(Error::dim(
                "normalize_groups",
                format!("{} columns in groups of {group}", t.cols()),
            ));
        }
        let mut value = t.clone();
        for chunk in value.data_mut().chunks_mut(group) {
            let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in chunk.iter_mut() {
                *v /= n;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(value, Op::NormalizeGroups { x, group, eps }, ng))
    }

    /// L2 norm of every consecutive group of `group` columns.
    pub fn group_norms(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        require_matrix("group_norms", t)?;
        if group == 0 || t.cols() % group != 0 {
            return Err(Error::dim(
                "group_norms",
                format!("{} columns in groups of {group}", t.cols()),
            ));
        }
        let data = t
            .data()
            .chunks(group)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::matrix(t.rows(), t.cols() / group, data);
        let ng = self.ng(x);
        Ok(self.push(value, Op::GroupNorms { x, group }, ng))
    }

    /// Cross product of matching 3-column groups of `a` and `b`.
    pub fn cross3(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("cross3", ta, tb)?;
        require_matrix("cross3", ta)?;
        if ta.cols() % 3 != 0 {
            return Err(Error::dim("cross3", format!("{} columns", ta.cols())));
        }
        let mut value = ta.zeros_like();
        for ((o, u), v) in value
            .data_mut()
            .chunks_mut(3)
            .zip(ta.data().chunks(3))
            .zip(tb.data().chunks(3))
        {
            o.copy_from_slice(&cross(u, v));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Cross3(a, b), ng))
    }

    /// Column-wise minimum over rows (`1 × C`). The gradient flows to the
    /// selected row only; ties go to the lowest row index.
    pub fn min_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        require_matrix("min_rows", t)?;
        if t.rows() == 0 {
            return Err(Error::dim("min_rows", "no rows"));
        }
        let mut argmin = vec![0usize; t.cols()];
        let mut best: Vec<f64> = t.row(0).to_vec();
        for r in 1..t.rows() {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v < best[c] {
                    best[c] = v;
                    argmin[c] = r;
                }
            }
        }
        let value = Tensor::row_vector(best);
        let ng = self.ng(x);
        Ok(self.push(value, Op::MinRows { x, argmin }, ng))
    }

    /// Minimum over all entries, gradient to the first minimal entry.
    pub fn min_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let col = self.reshape(x, n, 1)?;
        self.min_rows(col)
    }

    /// Squared Euclidean distances between rows of `x` (`L × C`) and the
    /// rows of a constant `targets` (`P × C`), as an `L × P` matrix.
    pub fn pairwise_sq_dist(&mut self, x: Var, targets: Tensor) -> Result<Var> {
        let t = self.value(x);
        require_matrix("pairwise_sq_dist", t)?;
        if !targets.is_matrix() || targets.cols() != t.cols() {
            return Err(Error::dim(
                "pairwise_sq_dist",
                format!("{:?} vs targets {:?}", t.shape(), targets.shape()),
            ));
        }
        let (l, p) = (t.rows(), targets.rows());
        let mut data = Vec::with_capacity(l * p);
        for i in 0..l {
            let xi = t.row(i);
            for j in 0..p {
                data.push(
                    xi.iter()
                        .zip(targets.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum(),
                );
            }
        }
        let value = Tensor::matrix(l, p, data);
        let ng = self.ng(x);
        Ok(self.push(value, Op::PairwiseSqDist { x, targets }, ng))
    }

    /// Gradients of a single-element `root` with respect to every node.
    pub fn gradients(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(root_value.shape().to_vec(), vec![1.0])?);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d root / d p` into the gradient of every parameter `p`
    /// reachable from `root`.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(root)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate(id, g);
            }
        }
        Ok(grads)
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, ta);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        Strided::row_major(g.data(), n),
                        Strided::transposed(tb.data(), n),
                        1.0,
                        buf.data_mut(),
                    );
                }
                if self.ng(*b) {
                    let buf = grad_buf(grads, *b, tb);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        Strided::transposed(ta.data(), k),
                        Strided::row_major(g.data(), n),
                        1.0,
                        buf.data_mut(),
                    );
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |gv, _| gv);
                self.acc_map(grads, *b, g, |gv, _| gv);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |gv, _| gv);
                self.acc_map(grads, *b, g, |gv, _| -gv);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, ta);
                    for ((o, gv), bv) in buf.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gv * bv;
                    }
                }
                if self.ng(*b) {
                    let buf = grad_buf(grads, *b, tb);
                    for ((o, gv), av) in buf.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => self.acc_map(grads, *a, g, |gv, _| c * gv),
            Op::AddScalar(a) => self.acc_map(grads, *a, g, |gv, _| gv),
            Op::Tanh(a) => {
                let y = &node.value;
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, y);
                    for ((o, gv), yv) in buf.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Prelu(x, slope) => {
                let tx = self.value(*x);
                let s = self.value(*slope).item();
                self.acc_map(grads, *x, g, |gv, xv| if xv > 0.0 { gv } else { s * gv });
                if self.ng(*slope) {
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .filter(|(_, &xv)| xv <= 0.0)
                        .map(|(gv, xv)| gv * xv)
                        .sum();
                    let buf = grad_buf(grads, *slope, self.value(*slope));
                    buf.data_mut()[0] += ds;
                }
            }
            Op::Exp(a) => {
                let y = &node.value;
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, y);
                    for ((o, gv), yv) in buf.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv * yv;
                    }
                }
            }
            Op::Log(a) => self.acc_map(grads, *a, g, |gv, xv| gv / xv),
            Op::Square(a) => self.acc_map(grads, *a, g, |gv, xv| 2.0 * xv * gv),
            Op::Sum(a) => {
                let gv = g.item();
                self.acc_map_scalar(grads, *a, |_| gv);
            }
            Op::Mean(a) => {
                let gv = g.item() / self.value(*a).len() as f64;
                self.acc_map_scalar(grads, *a, |_| gv);
            }
            Op::L1(a) => {
                let gv = g.item();
                self.acc_map_scalar(grads, *a, |xv| gv * sign(xv));
            }
            Op::L2(a) => {
                let n = node.value.item();
                let gv = g.item();
                if n > 0.0 {
                    self.acc_map_scalar(grads, *a, |xv| gv * xv / n);
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    if self.ng(p) {
                        let buf = grad_buf(grads, p, tp);
                        if *axis == 0 {
                            let c = tp.cols();
                            let src = &g.data()[offset * c..(offset + tp.rows()) * c];
                            for (o, s) in buf.data_mut().iter_mut().zip(src) {
                                *o += s;
                            }
                        } else {
                            for r in 0..tp.rows() {
                                let src = &g.row(r)[offset..offset + tp.cols()];
                                for (o, s) in buf.row_mut(r).iter_mut().zip(src) {
                                    *o += s;
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { tp.rows() } else { tp.cols() };
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                if self.ng(*x) {
                    let buf = grad_buf(grads, *x, tx);
                    if *axis == 0 {
                        let c = tx.cols();
                        let dst = &mut buf.data_mut()[start * c..start * c + g.len()];
                        for (o, s) in dst.iter_mut().zip(g.data()) {
                            *o += s;
                        }
                    } else {
                        let w = g.cols();
                        for r in 0..tx.rows() {
                            for (o, s) in buf.row_mut(r)[*start..start + w].iter_mut().zip(g.row(r)) {
                                *o += s;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.ng(*x) {
                    let gt = g.transpose();
                    let buf = grad_buf(grads, *x, self.value(*x));
                    buf.add_assign(&gt);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.acc_map(grads, *x, g, |gv, xv| if xv >= lo && xv <= hi { gv } else { 0.0 });
            }
            Op::Acos(x) => {
                let lim = 1.0 - ACOS_CLAMP;
                self.acc_map(grads, *x, g, |gv, xv| {
                    if xv.abs() <= lim {
                        -gv / (1.0 - xv * xv).sqrt()
                    } else {
                        0.0
                    }
                });
            }
            Op::AddRow(x, row) => {
                self.acc_map(grads, *x, g, |gv, _| gv);
                if self.ng(*row) {
                    let c = g.cols();
                    let buf = grad_buf(grads, *row, self.value(*row));
                    for chunk in g.data().chunks(c) {
                        for (o, s) in buf.data_mut().iter_mut().zip(chunk) {
                            *o += s;
                        }
                    }
                }
            }
            Op::RowSums(x) => {
                let tx = self.value(*x);
                if self.ng(*x) {
                    let c = tx.cols();
                    let buf = grad_buf(grads, *x, tx);
                    for (r, chunk) in buf.data_mut().chunks_mut(c).enumerate() {
                        let gv = g.data()[r];
                        for o in chunk {
                            *o += gv;
                        }
                    }
                }
            }
            Op::RowL1(x) => {
                let tx = self.value(*x);
                if self.ng(*x) {
                    let c = tx.cols();
                    let buf = grad_buf(grads, *x, tx);
                    for (r, (chunk, xs)) in buf
                        .data_mut()
                        .chunks_mut(c)
                        .zip(tx.data().chunks(c))
                        .enumerate()
                    {
                        let gv = g.data()[r];
                        for (o, &xv) in chunk.iter_mut().zip(xs) {
                            *o += gv * sign(xv);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.ng(*x) {
                    let buf = grad_buf(grads, *x, self.value(*x));
                    for (o, s) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o += s;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.ng(*x) {
                    let buf = grad_buf(grads, *x, self.value(*x));
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, s) in buf.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += s;
                        }
                    }
                }
            }
            Op::GatherCols { x, idx } => {
                if self.ng(*x) {
                    let tx = self.value(*x);
                    let buf = grad_buf(grads, *x, tx);
                    for r in 0..tx.rows() {
                        let grow = g.row(r);
                        let brow = buf.row_mut(r);
                        for (k, &i) in idx.iter().enumerate() {
                            brow[i] += grow[k];
                        }
                    }
                }
            }
            Op::BlockMatMul { a, x, blocks } => {
                let (ta, tx) = (self.value(*a), self.value(*x));
                let (p, q, c) = (ta.rows(), ta.cols(), tx.cols());
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, ta);
                    for b in 0..*blocks {
                        gemm(
                            p,
                            c,
                            q,
                            1.0,
                            Strided::row_major(&g.data()[b * p * c..(b + 1) * p * c], c),
                            Strided::transposed(&tx.data()[b * q * c..(b + 1) * q * c], c),
                            1.0,
                            buf.data_mut(),
                        );
                    }
                }
                if self.ng(*x) {
                    let buf = grad_buf(grads, *x, tx);
                    for b in 0..*blocks {
                        gemm(
                            q,
                            p,
                            c,
                            1.0,
                            Strided::transposed(ta.data(), q),
                            Strided::row_major(&g.data()[b * p * c..(b + 1) * p * c], c),
                            1.0,
                            &mut buf.data_mut()[b * q * c..(b + 1) * q * c],
                        );
                    }
                }
            }
            Op::BlockTranspose { x, blocks } => {
                if self.ng(*x) {
                    let back = block_transpose_raw(g, *blocks);
                    let buf = grad_buf(grads, *x, self.value(*x));
                    buf.add_assign(&back);
                }
            }
            Op::NormalizeGroups { x, group, eps } => {
                let tx = self.value(*x);
                if self.ng(*x) {
                    let y = &node.value;
                    let buf = grad_buf(grads, *x, tx);
                    for ((o, xs), (ys, gs)) in buf
                        .data_mut()
                        .chunks_mut(*group)
                        .zip(tx.data().chunks(*group))
                        .zip(y.data().chunks(*group).zip(g.data().chunks(*group)))
                    {
                        let n = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n > *eps {
                            let yg: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                            for ((ov, yv), gv) in o.iter_mut().zip(ys).zip(gs) {
                                *ov += (gv - yv * yg) / n;
                            }
                        } else {
                            for (ov, gv) in o.iter_mut().zip(gs) {
                                *ov += gv / eps;
                            }
                        }
                    }
                }
            }
            Op::GroupNorms { x, group } => {
                let tx = self.value(*x);
                if self.ng(*x) {
                    let y = &node.value;
                    let buf = grad_buf(grads, *x, tx);
                    for (k, (o, xs)) in buf
                        .data_mut()
                        .chunks_mut(*group)
                        .zip(tx.data().chunks(*group))
                        .enumerate()
                    {
                        let n = y.data()[k];
                        if n > 0.0 {
                            let gv = g.data()[k];
                            for (ov, xv) in o.iter_mut().zip(xs) {
                                *ov += gv * xv / n;
                            }
                        }
                    }
                }
            }
            Op::Cross3(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, ta);
                    for ((o, bs), gs) in buf
                        .data_mut()
                        .chunks_mut(3)
                        .zip(tb.data().chunks(3))
                        .zip(g.data().chunks(3))
                    {
                        let d = cross(bs, gs);
                        for (ov, dv) in o.iter_mut().zip(d) {
                            *ov += dv;
                        }
                    }
                }
                if self.ng(*b) {
                    let buf = grad_buf(grads, *b, tb);
                    for ((o, as_), gs) in buf
                        .data_mut()
                        .chunks_mut(3)
                        .zip(ta.data().chunks(3))
                        .zip(g.data().chunks(3))
                    {
                        let d = cross(gs, as_);
                        for (ov, dv) in o.iter_mut().zip(d) {
                            *ov += dv;
                        }
                    }
                }
            }
            Op::MinRows { x, argmin } => {
                if self.ng(*x) {
                    let buf = grad_buf(grads, *x, self.value(*x));
                    let c = buf.cols();
                    for (col, &r) in argmin.iter().enumerate() {
                        buf.data_mut()[r * c + col] += g.data()[col];
                    }
                }
            }
            Op::PairwiseSqDist { x, targets } => {
                let tx = self.value(*x);
                if self.ng(*x) {
                    let p = targets.rows();
                    let buf = grad_buf(grads, *x, tx);
                    for i in 0..tx.rows() {
                        let xi = tx.row(i);
                        let gi = &g.data()[i * p..(i + 1) * p];
                        let bi = buf.row_mut(i);
                        for (j, &gv) in gi.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for ((o, xv), tv) in bi.iter_mut().zip(xi).zip(targets.row(j)) {
                                *o += 2.0 * gv * (xv - tv);
                            }
                        }
                    }
                }
            }
        }
    }

    /// `grad[v] += f(g, x)` elementwise, where `x` is the value of `v`.
    fn acc_map(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, f: impl Fn(f64, f64) -> f64) {
        if !self.ng(v) {
            return;
        }
        let tv = self.value(v);
        let buf = grad_buf(grads, v, tv);
        for ((o, gv), xv) in buf.data_mut().iter_mut().zip(g.data()).zip(tv.data()) {
            *o += f(*gv, *xv);
        }
    }

    /// `grad[v] += f(x)` elementwise, for gradients of reductions.
    fn acc_map_scalar(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(f64) -> f64) {
        if !self.ng(v) {
            return;
        }
        let tv = self.value(v);
        let buf = grad_buf(grads, v, tv);
        for (o, xv) in buf.data_mut().iter_mut().zip(tv.data()) {
            *o += f(*xv);
        }
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| like.zeros_like())
}

fn cross(u: &[f64], v: &[f64]) -> [f64; 3] {
    [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ]
}

fn block_transpose_raw(t: &Tensor, blocks: usize) -> Tensor {
    let r = t.rows() / blocks;
    let c = t.cols();
    let mut out = vec![0.0; t.len()];
    for b in 0..blocks {
        let src = &t.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    Tensor::matrix(blocks * c, r, out)
}
