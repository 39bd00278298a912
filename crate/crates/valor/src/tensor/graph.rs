//! Computation tape: forward ops record parents and enough context to run the
//! chain rule backwards. Nodes are appended in topological order (parents
//! always precede children), so one reverse sweep visits each node once.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    MulScalar(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Gelu(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Softmax { x: NodeId, axis: usize },
    LogSoftmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    L2NormRows { x: NodeId, eps: f64 },
    Embedding { table: NodeId, ids: Vec<usize> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    SumAll(NodeId),
    MeanAll(NodeId),
    MeanRows(NodeId),
    MaxAxis { x: NodeId, axis: usize, argmax: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, len: usize },
    Reshape(NodeId),
    StackScalars(Vec<NodeId>),
    TakeDiag(NodeId),
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs: bool,
    grad: Option<Vec<f64>>,
}

/// One training step's computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, NodeId)>,
    param_cache: HashMap<ParamId, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs,
            grad: None,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs
    }

    /// Leaf without gradient tracking (inputs, masks, constants).
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar_input(&mut self, v: f64) -> NodeId {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    /// Leaf for a stored parameter. Repeated calls with the same id return the
    /// same node, so shared weights contribute one leaf whose gradient
    /// accumulates over every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_cache.get(&id) {
            return n;
        }
        let t = store.get(id);
        let n = self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad);
        self.param_cache.insert(id, n);
        self.param_nodes.push((id, n));
        n
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Value of a single-element node.
    pub fn value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn rows_cols(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), needs))
    }

    /// `a[r,c] + b` broadcast over rows; `b` is `[c]` or `[1,c]`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(a, "add_row")?;
        let bn = self.data(b).len();
        if bn != c {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        let (av, bv) = (self.data(a), self.data(b));
        for i in 0..r {
            for j in 0..c {
                data.push(av[i * c + j] + bv[j]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![r, c], data, Op::AddRow(a, b), needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::ScaleConst(a, c), needs)
    }

    /// Multiply every element of `a` by scalar node `s` (shape `[1]`).
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.data(s).len() != 1 {
            return Err(Error::Contract("mul_scalar expects a [1] scalar node".into()));
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(a).iter().map(|x| x * sv).collect();
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(self.shape(a).to_vec(), data, Op::MulScalar(a, s), needs))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| -x).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Neg(a), needs)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.exp()).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Exp(a), needs)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.ln()).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Ln(a), needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh()))
            .collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Gelu(a), needs)
    }

    // ── Matrix ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rows_cols(a, "matmul")?;
        let (k2, n) = self.rows_cols(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(a, "transpose")?;
        let av = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![c, r], data, Op::Transpose(a), needs))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    // ── Softmax family ──────────────────────────────────────────────────

    /// Numerically stable softmax; rejects any non-finite input.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        if self.data(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        self.softmax_masked(x, axis)
    }

    /// Softmax that tolerates -inf entries coming from additive masks. Every
    /// lane must keep at least one finite entry.
    pub fn softmax_masked(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (lanes, data) = self.lane_map(x, axis, "softmax", |lane, out| {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Numeric("softmax lane has no finite entries".into()));
            }
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(lane.iter()) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
            Ok(())
        })?;
        let needs = self.needs(x);
        Ok(self.push(lanes, data, Op::Softmax { x, axis }, needs))
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (lanes, data) = self.lane_map(x, axis, "log_softmax", |lane, out| {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Numeric("log_softmax lane has no finite entries".into()));
            }
            let mut sum = 0.0;
            for &v in lane.iter() {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            for (o, &v) in out.iter_mut().zip(lane.iter()) {
                *o = v - lse;
            }
            Ok(())
        })?;
        let needs = self.needs(x);
        Ok(self.push(lanes, data, Op::LogSoftmax { x, axis }, needs))
    }

    /// Applies `f` to every lane along `axis`; returns (shape, new data).
    fn lane_map<F>(
        &self,
        x: NodeId,
        axis: usize,
        op: &'static str,
        mut f: F,
    ) -> Result<(Vec<usize>, Vec<f64>)>
    where
        F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    {
        let shape = self.shape(x).to_vec();
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        match (shape.len(), axis) {
            (1, 0) => f(xd, &mut out)?,
            (2, 1) => {
                let (r, c) = (shape[0], shape[1]);
                for i in 0..r {
                    f(&xd[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c])?;
                }
            }
            (2, 0) => {
                let (r, c) = (shape[0], shape[1]);
                let mut lane = vec![0.0; r];
                let mut lane_out = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        lane[i] = xd[i * c + j];
                    }
                    f(&lane, &mut lane_out)?;
                    for i in 0..r {
                        out[i * c + j] = lane_out[i];
                    }
                }
            }
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: shape,
                    rhs: vec![axis],
                })
            }
        }
        Ok((shape, out))
    }

    // ── Normalization ───────────────────────────────────────────────────

    /// Per-row layer normalization with affine scale/shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "layer_norm")?;
        if self.data(gamma).len() != c || self.data(beta).len() != c {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: vec![r, c],
                rhs: vec![self.data(gamma).len(), self.data(beta).len()],
            });
        }
        let xd = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(vec![r, c], data, Op::LayerNorm { x, gamma, beta, eps }, needs))
    }

    /// Rows scaled to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let eps = 1e-12;
        let (r, c) = self.rows_cols(x, "l2_normalize_rows")?;
        let xd = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for j in 0..c {
                data[i * c + j] = row[j] / norm;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, c], data, Op::L2NormRows { x, eps }, needs))
    }

    // ── Lookup / selection ──────────────────────────────────────────────

    /// Rows of `table` selected by vocabulary id; backward scatter-adds.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, c) = self.rows_cols(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!(
                "embedding id {bad} out of vocabulary range {v}"
            )));
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&td[i * c..(i + 1) * c]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), c],
            data,
            Op::Embedding { table, ids: ids.to_vec() },
            needs,
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row index {bad} out of range {r}")));
        }
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with empty index set".into()));
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![idx.len(), c],
            data,
            Op::GatherRows { x, idx: idx.to_vec() },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::Index(format!(
                "column slice {start}..{} out of range {c}",
                start + len
            )));
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, len], data, Op::SliceCols { x, start, len }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, c) = self.rows_cols(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r2, c2) = self.rows_cols(p, "concat_rows")?;
            if c2 != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r2;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, c], data, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (r, _) = self.rows_cols(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (r2, c2) = self.rows_cols(p, "concat_cols")?;
            if r2 != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            cols += c2;
        }
        let mut data = vec![0.0; r * cols];
        let mut off = 0;
        for &p in parts {
            let (_, pc) = self.rows_cols(p, "concat_cols")?;
            let pd = self.data(p);
            for i in 0..r {
                data[i * cols + off..i * cols + off + pc].copy_from_slice(&pd[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![r, cols], data, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, data, Op::Reshape(x), needs))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push(vec![1], vec![s], Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.data(a).len();
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        let needs = self.needs(a);
        self.push(vec![1], vec![s], Op::MeanAll(a), needs)
    }

    /// `[r,c] -> [1,c]`, mean over rows.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(a, "mean_rows")?;
        let ad = self.data(a);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += ad[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        let needs = self.needs(a);
        Ok(self.push(vec![1, c], data, Op::MeanRows(a), needs))
    }

    /// Max along `axis` of a 2D node; ties resolve to the lowest index.
    /// `axis=1` gives per-row maxima `[r]`; `axis=0` per-column maxima `[c]`.
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "max_axis")?;
        let xd = self.data(x);
        let (out_len, lane_len) = match axis {
            1 => (r, c),
            0 => (c, r),
            _ => {
                return Err(Error::Shape {
                    op: "max_axis",
                    lhs: vec![r, c],
                    rhs: vec![axis],
                })
            }
        };
        let mut data = vec![0.0; out_len];
        let mut argmax = vec![0usize; out_len];
        for lane in 0..out_len {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for i in 0..lane_len {
                let v = if axis == 1 { xd[lane * c + i] } else { xd[i * c + lane] };
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            data[lane] = best;
            argmax[lane] = best_i;
        }
        let needs = self.needs(x);
        Ok(self.push(vec![out_len], data, Op::MaxAxis { x, axis, argmax }, needs))
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (r, v) = self.rows_cols(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![r, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!(
                "cross_entropy target {bad} out of vocabulary range {v}"
            )));
        }
        let xd = self.data(logits);
        let mut probs = vec![0.0; r * v];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &xd[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Numeric("cross_entropy logits are non-finite".into()));
            }
            let mut sum = 0.0;
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[i * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[i * v + j] /= sum;
            }
            loss -= (row[targets[i]] - max - sum.ln()) / r as f64;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            needs,
        ))
    }

    /// Assemble scalar nodes into an `[rows, cols]` matrix, row-major.
    pub fn stack_scalars(&mut self, xs: &[NodeId], rows: usize, cols: usize) -> Result<NodeId> {
        if xs.len() != rows * cols {
            return Err(Error::Contract(format!(
                "stack_scalars got {} nodes for a {rows}x{cols} matrix",
                xs.len()
            )));
        }
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            if self.data(x).len() != 1 {
                return Err(Error::Contract("stack_scalars expects scalar nodes".into()));
            }
            data.push(self.data(x)[0]);
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(vec![rows, cols], data, Op::StackScalars(xs.to_vec()), needs))
    }

    pub fn take_diag(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "take_diag")?;
        if r != c {
            return Err(Error::Shape {
                op: "take_diag",
                lhs: vec![r, c],
                rhs: vec![],
            });
        }
        let xd = self.data(x);
        let data: Vec<f64> = (0..r).map(|i| xd[i * c + i]).collect();
        let needs = self.needs(x);
        Ok(self.push(vec![r], data, Op::TakeDiag(x), needs))
    }

    /// Dot product of two rank-1 nodes.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        Ok(self.sum_all(p))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each call computes one full gradient
    /// and adds it to whatever is already stored, so repeated calls without a
    /// reset accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].data[0].is_finite() {
            return Err(Error::Numeric("backward on a non-finite loss".into()));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if scratch[i].is_none() || !(self.nodes[i].needs || i == loss.0) {
                continue;
            }
            self.backprop_node(i, &mut scratch);
        }
        for (i, slot) in scratch.into_iter().enumerate() {
            if let Some(sg) = slot {
                if self.nodes[i].needs || i == loss.0 {
                    let node = &mut self.nodes[i];
                    let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                    for (gd, s) in g.iter_mut().zip(&sg) {
                        *gd += s;
                    }
                }
            }
        }
        Ok(())
    }

    /// Add each parameter leaf's gradient into the store (accumulate, not
    /// overwrite, so shared parameters gather every role's contribution).
    pub fn export_grads(&self, store: &mut ParamStore) {
        for &(pid, nid) in &self.param_nodes {
            if let Some(g) = self.nodes[nid.0].grad.as_ref() {
                store.get_mut(pid).accumulate_grad(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, scratch: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let gout = scratch[i].take().expect("checked by caller");
        let nodes = &self.nodes;
        let add_to = |scratch: &mut [Option<Vec<f64>>], id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].needs {
                return;
            }
            let len = nodes[id.0].data.len();
            let g = scratch[id.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };

        match node.op.clone() {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(scratch, a, &mut |g| {
                    for (gd, go) in g.iter_mut().zip(&gout) {
                        *gd += go;
                    }
                });
                add_to(scratch, b, &mut |g| {
                    for (gd, go) in g.iter_mut().zip(&gout) {
                        *gd += go;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let c = nodes[b.0].data.len();
                add_to(scratch, a, &mut |g| {
                    for (gd, go) in g.iter_mut().zip(&gout) {
                        *gd += go;
                    }
                });
                add_to(scratch, b, &mut |g| {
                    for (k, go) in gout.iter().enumerate() {
                        g[k % c] += go;
                    }
                });
            }
            Op::Sub(a, b) => {
                add_to(scratch, a, &mut |g| {
                    for (gd, go) in g.iter_mut().zip(&gout) {
                        *gd += go;
                    }
                });
                add_to(scratch, b, &mut |g| {
                    for (gd, go) in g.iter_mut().zip(&gout) {
                        *gd -= go;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (nodes[a.0].data.clone(), nodes[b.0].data.clone());
                add_to(scratch, a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gout[k] * bd[k];
                    }
                });
                add_to(scratch, b, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gout[k] * ad[k];
                    }
                });
            }
            Op::ScaleConst(a, c) => {
                add_to(scratch, a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gout[k] * c;
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let sv = nodes[s.0].data[0];
                let ad = nodes[a.0].data.clone();
                add_to(scratch, a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gout[k] * sv;
                    }
                });
                add_to(scratch, s, &mut |g| {
                    let mut acc = 0.0;
                    for k in 0..ad.len() {
                        acc += gout[k] * ad[k];
                    }
                    g[0] += acc;
                });
            }
            Op::Neg(a) => {
                add_to(scratch, a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] -= gout[k];
                    }
                });
            }
            Op::Exp(a) => {
                let out = node.data.clone();
                add_to(scratch, a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gout[k] * out[k];
                    }
                });
            }
            Op::Ln(a) => {
                let ad = nodes[a.0].data.clone();
                add_to(scratch, a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gout[k] / ad[k];
                    }
                });
            }
            Op::Gelu(a) => {
                let ad = nodes[a.0].data.clone();
                add_to(scratch, a, &mut |g| {
                    for k in 0..g.len() {
                        let x = ad[k];
                        let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        g[k] += gout[k] * d;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let ad = nodes[a.0].data.clone();
                let bd = nodes[b.0].data.clone();
                // dA = dC @ B^T
                add_to(scratch, a, &mut |g| {
                    for i in 0..m {
                        for p in 0..n {
                            let go = gout[i * n + p];
                            if go == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                g[i * k + j] += go * bd[j * n + p];
                            }
                        }
                    }
                });
                // dB = A^T @ dC
                add_to(scratch, b, &mut |g| {
                    for i in 0..m {
                        for j in 0..k {
                            let av = ad[i * k + j];
                            if av == 0.0 {
                                continue;
                            }
                            for p in 0..n {
                                g[j * n + p] += av * gout[i * n + p];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (c, r) = (node.shape[0], node.shape[1]);
                add_to(scratch, a, &mut |g| {
                    for i in 0..c {
                        for j in 0..r {
                            g[j * c + i] += gout[i * r + j];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.data.clone();
                let shape = node.shape.clone();
                add_to(scratch, x, &mut |g| {
                    softmax_backward(&y, &gout, &shape, axis, g);
                });
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.data.clone();
                let shape = node.shape.clone();
                add_to(scratch, x, &mut |g| {
                    log_softmax_backward(&y, &gout, &shape, axis, g);
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let xd = nodes[x.0].data.clone();
                let gd = nodes[gamma.0].data.clone();
                add_to(scratch, x, &mut |g| {
                    for i in 0..r {
                        let row = &xd[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = gout[i * c + j] * gd[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = gout[i * c + j] * gd[j];
                            g[i * c + j] += inv
                                * (dxhat - sum_dxhat / c as f64 - xhat * sum_dxhat_xhat / c as f64);
                        }
                    }
                });
                add_to(scratch, gamma, &mut |g| {
                    for i in 0..r {
                        let row = &xd[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for j in 0..c {
                            g[j] += gout[i * c + j] * (row[j] - mean) * inv;
                        }
                    }
                });
                add_to(scratch, beta, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += gout[i * c + j];
                        }
                    }
                });
            }
            Op::L2NormRows { x, eps } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let xd = nodes[x.0].data.clone();
                add_to(scratch, x, &mut |g| {
                    for i in 0..r {
                        let row = &xd[i * c..(i + 1) * c];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
                        let y: Vec<f64> = row.iter().map(|v| v / norm).collect();
                        let ydg: f64 = (0..c).map(|j| y[j] * gout[i * c + j]).sum();
                        for j in 0..c {
                            g[i * c + j] += (gout[i * c + j] - y[j] * ydg) / norm;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let c = node.shape[1];
                add_to(scratch, table, &mut |g| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            g[id * c + j] += gout[row * c + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = node.shape[1];
                add_to(scratch, x, &mut |g| {
                    for (row, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += gout[row * c + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let r = targets.len();
                let v = nodes[logits.0].shape[1];
                let scale = gout[0] / r as f64;
                add_to(scratch, logits, &mut |g| {
                    for i in 0..r {
                        for j in 0..v {
                            let delta = if j == targets[i] { 1.0 } else { 0.0 };
                            g[i * v + j] += scale * (probs[i * v + j] - delta);
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                add_to(scratch, a, &mut |g| {
                    for gd in g.iter_mut() {
                        *gd += gout[0];
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = nodes[a.0].data.len() as f64;
                add_to(scratch, a, &mut |g| {
                    for gd in g.iter_mut() {
                        *gd += gout[0] / n;
                    }
                });
            }
            Op::MeanRows(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                add_to(scratch, a, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[j] / r as f64;
                        }
                    }
                });
            }
            Op::MaxAxis { x, axis, argmax } => {
                let c = nodes[x.0].shape[1];
                add_to(scratch, x, &mut |g| {
                    for (lane, &best_i) in argmax.iter().enumerate() {
                        let flat = if axis == 1 { lane * c + best_i } else { best_i * c + lane };
                        g[flat] += gout[lane];
                    }
                });
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for id in ids {
                    let n = nodes[id.0].data.len();
                    let seg = gout[off..off + n].to_vec();
                    add_to(scratch, id, &mut |g| {
                        for (gd, go) in g.iter_mut().zip(&seg) {
                            *gd += go;
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatCols(ids) => {
                let r = node.shape[0];
                let cols = node.shape[1];
                let mut off = 0;
                for id in ids {
                    let pc = nodes[id.0].shape[1];
                    let mut seg = vec![0.0; r * pc];
                    for i in 0..r {
                        seg[i * pc..(i + 1) * pc]
                            .copy_from_slice(&gout[i * cols + off..i * cols + off + pc]);
                    }
                    add_to(scratch, id, &mut |g| {
                        for (gd, go) in g.iter_mut().zip(&seg) {
                            *gd += go;
                        }
                    });
                    off += pc;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                add_to(scratch, x, &mut |g| {
                    for i in 0..r {
                        for j in 0..len {
                            g[i * c + start + j] += gout[i * len + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                add_to(scratch, a, &mut |g| {
                    for (gd, go) in g.iter_mut().zip(&gout) {
                        *gd += go;
                    }
                });
            }
            Op::StackScalars(ids) => {
                for (k, id) in ids.into_iter().enumerate() {
                    add_to(scratch, id, &mut |g| {
                        g[0] += gout[k];
                    });
                }
            }
            Op::TakeDiag(x) => {
                let n = node.shape[0];
                add_to(scratch, x, &mut |g| {
                    for i in 0..n {
                        g[i * n + i] += gout[i];
                    }
                });
            }
        }
        scratch[i] = Some(gout);
    }
}

/// Row-major `A[m,k] @ B[k,n]`, ikj loop order for cache friendliness.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn softmax_backward(y: &[f64], gout: &[f64], shape: &[usize], axis: usize, g: &mut [f64]) {
    let lane_apply = |lane_y: &[f64], lane_g: &[f64], out: &mut [f64]| {
        let s: f64 = lane_y.iter().zip(lane_g).map(|(yv, gv)| yv * gv).sum();
        for j in 0..lane_y.len() {
            out[j] = lane_y[j] * (lane_g[j] - s);
        }
    };
    apply_lanes(y, gout, shape, axis, g, lane_apply);
}

fn log_softmax_backward(y: &[f64], gout: &[f64], shape: &[usize], axis: usize, g: &mut [f64]) {
    let lane_apply = |lane_y: &[f64], lane_g: &[f64], out: &mut [f64]| {
        let s: f64 = lane_g.iter().sum();
        for j in 0..lane_y.len() {
            out[j] = lane_g[j] - lane_y[j].exp() * s;
        }
    };
    apply_lanes(y, gout, shape, axis, g, lane_apply);
}

fn apply_lanes<F>(y: &[f64], gout: &[f64], shape: &[usize], axis: usize, g: &mut [f64], f: F)
where
    F: Fn(&[f64], &[f64], &mut [f64]),
{
    match (shape.len(), axis) {
        (1, 0) => {
            let mut out = vec![0.0; y.len()];
            f(y, gout, &mut out);
            for (gd, o) in g.iter_mut().zip(&out) {
                *gd += o;
            }
        }
        (2, 1) => {
            let (r, c) = (shape[0], shape[1]);
            let mut out = vec![0.0; c];
            for i in 0..r {
                f(&y[i * c..(i + 1) * c], &gout[i * c..(i + 1) * c], &mut out);
                for j in 0..c {
                    g[i * c + j] += out[j];
                }
            }
        }
        (2, 0) => {
            let (r, c) = (shape[0], shape[1]);
            let mut lane_y = vec![0.0; r];
            let mut lane_g = vec![0.0; r];
            let mut out = vec![0.0; r];
            for j in 0..c {
                for i in 0..r {
                    lane_y[i] = y[i * c + j];
                    lane_g[i] = gout[i * c + j];
                }
                f(&lane_y, &lane_g, &mut out);
                for i in 0..r {
                    g[i * c + j] += out[i];
                }
            }
        }
        _ => unreachable!("validated at forward"),
    }
}
