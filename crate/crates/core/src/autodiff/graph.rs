//! Define-by-run computation graph.
//!
//! Every op call appends a node and computes its value immediately, so the
//! insertion order is a valid topological order. [`Graph::backward`] walks
//! the nodes in exact reverse insertion order and leaves dL/dleaf in the
//! gradient slot of every trainable leaf that the loss depends on.
//!
//! A graph can be backpropagated once. Rebuild it for the next batch.

use std::ops::Range;

use super::tensor::{matmul_a_bt_into, matmul_at_b_into, matmul_into, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // normalized input and 1/sigma per row
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    Slice {
        x: NodeId,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backpropagated: bool,
}

fn dim_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Error {
    Error::Dimension { op, lhs, rhs }
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

    /// Inserts a leaf. Trainable leaves receive gradients on backward;
    /// frozen leaves never do.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.push(Op::Leaf, value.detached(), trainable)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last backward pass w.r.t. a trainable leaf, or `None`
    /// when the leaf is frozen or not reachable from the loss.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Smallest |input| seen by any ReLU in the graph; `None` without ReLUs.
    /// Finite-difference checks use it to stay clear of the kink.
    pub fn min_abs_relu_input(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|v| v.abs()))
            .reduce(f64::min)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let (n2, p) = self.shape(b);
        if n != n2 {
            return Err(dim_err("matmul", (m, n), (n2, p)));
        }
        let mut out = Tensor::zeros(m, p);
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            n,
            p,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    /// Adds a 1×n row to every row of an m×n input.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        if self.shape(row) != (1, n) {
            return Err(dim_err("add_row", (m, n), self.shape(row)));
        }
        let bias = self.value(row).data().to_vec();
        let mut out = self.value(x).detached();
        for r in out.data_mut().chunks_mut(n) {
            r.iter_mut().zip(&bias).for_each(|(v, b)| *v += b);
        }
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(Op::AddRow(x, row), out, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = self.value(x).scaled(factor);
        let rg = self.any_grad(&[x]);
        self.push(Op::Scale(x, factor), out, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).detached();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(Op::Relu(x), out, rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).transpose();
        let rg = self.any_grad(&[x]);
        self.push(Op::Transpose(x), out, rg)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let out = softmax_rows(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(Op::SoftmaxRows(x), out, rg)
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// followed by the affine `gamma * x_hat + beta` with 1×n gamma/beta.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, n) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, n) {
                return Err(dim_err("layer_norm", (m, n), self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..n {
                let h = (row[c] - mean) * istd;
                x_hat[r * n + c] = h;
                out.data_mut()[r * n + c] = g[c] * h + b[c];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
            out,
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits[batch×classes]` against class
    /// indices. Produces a 1×1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (batch, classes) = self.shape(logits);
        if labels.len() != batch {
            return Err(dim_err("cross_entropy", (batch, classes), (labels.len(), 1)));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Data(format!(
                "label {l} at record {i} is outside [0, {classes})"
            )));
        }
        let probs = softmax_rows(self.value(logits));
        let z = self.value(logits).data();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let loss = if batch == 0 { 0.0 } else { total / batch as f64 };
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.into_data(),
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Row lookup: output row i is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!(
                "row index {bad} out of range for table with {rows} rows"
            )));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(ids.len(), cols, data)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            out,
            rg,
        ))
    }

    pub fn slice(&mut self, x: NodeId, rows: Range<usize>, cols: Range<usize>) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        if rows.end > m || cols.end > n || rows.start > rows.end || cols.start > cols.end {
            return Err(dim_err("slice", (m, n), (rows.end, cols.end)));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&t.row(r)[cols.clone()]);
        }
        let out = Tensor::new(rows.len(), cols.len(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Slice { x, rows, cols }, out, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Config("concat_cols of zero tensors".into()));
        };
        let m = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != m {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(m, n, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Config("concat_rows of zero tensors".into()));
        };
        let n = self.shape(first).1;
        for &p in parts {
            if self.shape(p).1 != n {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(p)));
            }
        }
        let m: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(m * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(m, n, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, rg))
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "node {} does not exist; run the forward pass first",
                loss.0
            )));
        }
        if self.backpropagated {
            return Err(Error::State(
                "graph was already backpropagated; rebuild it with a fresh forward pass".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(dim_err("backward", self.shape(loss), (1, 1)));
        }
        self.backpropagated = true;

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    self.nodes[idx].value.set_grad(g);
                }
                Op::MatMul(a, b) => {
                    let (m, n) = self.shape(*a);
                    let p = self.shape(*b).1;
                    if self.requires_grad(*a) {
                        let mut da = vec![0.0; m * n];
                        matmul_a_bt_into(&g, self.value(*b).data(), &mut da, m, p, n);
                        accumulate(&mut adj, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; n * p];
                        matmul_at_b_into(self.value(*a).data(), &g, &mut db, m, n, p);
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires_grad(b) {
                        accumulate(&mut adj, b, g.clone());
                    }
                    if self.requires_grad(a) {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::AddRow(x, row) => {
                    let (x, row) = (*x, *row);
                    if self.requires_grad(row) {
                        let n = self.shape(row).1;
                        let mut db = vec![0.0; n];
                        for chunk in g.chunks(n) {
                            db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                        }
                        accumulate(&mut adj, row, db);
                    }
                    if self.requires_grad(x) {
                        accumulate(&mut adj, x, g);
                    }
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    accumulate(&mut adj, *x, g.into_iter().map(|v| v * f).collect());
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Transpose(x) => {
                    let (m, n) = self.shape(*x);
                    let gt = Tensor::new(n, m, g)?.transpose();
                    accumulate(&mut adj, *x, gt.into_data());
                }
                Op::SoftmaxRows(x) => {
                    let (_, n) = node.value.shape();
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dr[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (m, n) = node.value.shape();
                    let gv = self.value(gamma).data();
                    if self.requires_grad(gamma) {
                        let mut dg = vec![0.0; n];
                        for r in 0..m {
                            for c in 0..n {
                                dg[c] += g[r * n + c] * x_hat[r * n + c];
                            }
                        }
                        accumulate(&mut adj, gamma, dg);
                    }
                    if self.requires_grad(beta) {
                        let mut db = vec![0.0; n];
                        for chunk in g.chunks(n) {
                            db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                        }
                        accumulate(&mut adj, beta, db);
                    }
                    if self.requires_grad(x) {
                        let mut dx = vec![0.0; m * n];
                        let nf = n as f64;
                        for r in 0..m {
                            let xh = &x_hat[r * n..(r + 1) * n];
                            let dxh: Vec<f64> =
                                (0..n).map(|c| g[r * n + c] * gv[c]).collect();
                            let mean_d = dxh.iter().sum::<f64>() / nf;
                            let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / nf;
                            for c in 0..n {
                                dx[r * n + c] = inv_std[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
                            }
                        }
                        accumulate(&mut adj, x, dx);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let classes = self.shape(*logits).1;
                    let scale = g[0] / labels.len().max(1) as f64;
                    let mut dz = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        dz[r * classes + l] -= 1.0;
                    }
                    dz.iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut adj, *logits, dz);
                }
                Op::GatherRows { table, ids } => {
                    let (rows, cols) = self.shape(*table);
                    let mut dt = vec![0.0; rows * cols];
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g[i * cols..(i + 1) * cols];
                        dt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d += v);
                    }
                    accumulate(&mut adj, *table, dt);
                }
                Op::Slice { x, rows, cols } => {
                    let n = self.shape(*x).1;
                    let mut dx = vec![0.0; self.value(*x).len()];
                    let w = cols.len();
                    for (i, r) in rows.clone().enumerate() {
                        dx[r * n + cols.start..r * n + cols.end]
                            .copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let m = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    let parts = parts.clone();
                    for p in parts {
                        let w = self.shape(p).1;
                        if self.requires_grad(p) {
                            let mut dp = Vec::with_capacity(m * w);
                            for r in 0..m {
                                dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            accumulate(&mut adj, p, dp);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    let parts = parts.clone();
                    for p in parts {
                        let len = self.value(p).len();
                        if self.requires_grad(p) {
                            accumulate(&mut adj, p, g[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut adj[id.0] {
        Some(slot) => slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = x.shape();
    let mut out = x.detached();
    if n == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    debug_assert_eq!(out.rows(), m);
    out
}
