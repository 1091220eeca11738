//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A `Graph` records every operation applied to it; `backward` replays the
//! tape in reverse, accumulating vector-Jacobian products into a per-parameter
//! gradient map. Nodes are identified by their tape index, so the graph is
//! acyclic by construction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite output at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("invalid node id {0}")]
    InvalidNode(NodeId),
    #[error("{0}")]
    Invalid(String),
}

/// Per-parameter gradients, keyed by parameter name.
pub type GradientMap = BTreeMap<String, Tensor>;

/// Named leaf tensors: model parameters, optimizer targets, checkpoint
/// contents.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    /// Constant leaf: no gradient flows into it.
    Leaf,
    /// Named parameter leaf.
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product; the right operand may be a scalar.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    /// Row gather; doubles as embedding lookup on a parameter matrix.
    GatherRows(NodeId, Vec<usize>),
    SliceBlock {
        x: NodeId,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    /// Column-wise mean over rows: [n x d] -> [d].
    MeanRows(NodeId),
    /// Broadcast a row vector over every row of a matrix.
    AddRowVec(NodeId, NodeId),
    MulRowVec(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    /// Row-wise softmax with max subtraction.
    SoftmaxRows(NodeId),
    /// Divide each row by its sum.
    NormalizeRows(NodeId),
    /// Row-wise (x - mean) / sqrt(var + eps); affine terms are separate ops.
    LayerNormRows(NodeId),
    /// Multi-head attention scores: Q [n x d], K [m x d] -> [heads*n x m],
    /// scaled by 1/sqrt(d/heads).
    AttnScores {
        q: NodeId,
        k: NodeId,
        heads: usize,
    },
    /// Weighted sum of values: probs [heads*n x m], V [m x d] -> [n x d].
    AttnContext {
        probs: NodeId,
        v: NodeId,
        heads: usize,
    },
    /// Mean over rows of (logsumexp(row) - row[target]); stable softmax
    /// cross-entropy from logits.
    CrossEntropyRows(NodeId, Vec<usize>),
    /// Mean binary cross-entropy from probabilities (clamped before log);
    /// natural log.
    BceLoss(NodeId, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add-scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::ConcatRows(..) => "concat-rows",
            Op::ConcatCols(..) => "concat-cols",
            Op::GatherRows(..) => "gather-rows",
            Op::SliceBlock { .. } => "slice-block",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean-rows",
            Op::AddRowVec(..) => "add-row-vec",
            Op::MulRowVec(..) => "mul-row-vec",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::SoftmaxRows(..) => "softmax-rows",
            Op::NormalizeRows(..) => "normalize-rows",
            Op::LayerNormRows(..) => "layer-norm",
            Op::AttnScores { .. } => "attn-scores",
            Op::AttnContext { .. } => "attn-context",
            Op::CrossEntropyRows(..) => "cross-entropy",
            Op::BceLoss(..) => "bce-loss",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddRowVec(a, b) | Op::MulRowVec(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::GatherRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::SoftmaxRows(a)
            | Op::NormalizeRows(a)
            | Op::LayerNormRows(a)
            | Op::CrossEntropyRows(a, _)
            | Op::BceLoss(a, _) => vec![*a],
            Op::SliceBlock { x, .. } => vec![*x],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::AttnScores { q, k, .. } => vec![*q, *k],
            Op::AttnContext { probs, v, .. } => vec![*probs, *v],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    param_name: Option<String>,
}

/// Append-only computation tape. Single-writer: `apply` takes `&mut self`;
/// values of a finished graph may be read concurrently.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_ids: BTreeMap<String, NodeId>,
}

const LN_EPS: f64 = 1e-5;
const BCE_CLAMP: f64 = 1e-7;

fn shape_err(op: &'static str, detail: String) -> GraphError {
    GraphError::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false, None)
    }

    pub fn param(&mut self, name: &str, t: Tensor) -> Result<NodeId, GraphError> {
        if self.param_ids.contains_key(name) {
            return Err(GraphError::DuplicateParam(name.to_string()));
        }
        let id = self.push(Op::Param, t, true, Some(name.to_string()));
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, param_name: Option<String>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            param_name,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn tensor(&self, id: NodeId) -> Result<&Tensor, GraphError> {
        self.nodes.get(id).map(|n| &n.value).ok_or(GraphError::InvalidNode(id))
    }

    /// Record one operation: computes the output value eagerly and appends it.
    pub fn apply(&mut self, op: Op) -> Result<NodeId, GraphError> {
        for id in op.inputs() {
            if id >= self.nodes.len() {
                return Err(GraphError::InvalidNode(id));
            }
        }
        let value = self.eval(&op)?;
        if let Err(super::tensor::TensorError::NonFinite { index, .. }) =
            value.check_finite(op.name())
        {
            return Err(GraphError::NonFinite { op: op.name(), index });
        }
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(op, value, needs_grad, None))
    }

    fn eval(&self, op: &Op) -> Result<Tensor, GraphError> {
        match op {
            Op::Leaf | Op::Param => unreachable!("leaves are not applied"),
            Op::Add(a, b) => self.ew_binary("add", *a, *b, |x, y| x + y),
            Op::Sub(a, b) => self.ew_binary("sub", *a, *b, |x, y| x - y),
            Op::Mul(a, b) => self.ew_binary("mul", *a, *b, |x, y| x * y),
            Op::Scale(a, c) => Ok(self.tensor(*a)?.map(|x| x * c)),
            Op::AddScalar(a, c) => Ok(self.tensor(*a)?.map(|x| x + c)),
            Op::MatMul(a, b) => self
                .tensor(*a)?
                .matmul(self.tensor(*b)?)
                .map_err(|e| shape_err("matmul", e.to_string())),
            Op::Transpose(a) => Ok(self.tensor(*a)?.transpose()),
            Op::ConcatRows(ids) => self.concat_rows(ids),
            Op::ConcatCols(ids) => self.concat_cols(ids),
            Op::GatherRows(a, idx) => self.gather_rows(*a, idx),
            Op::SliceBlock { x, row0, rows, col0, cols } => {
                self.slice_block(*x, *row0, *rows, *col0, *cols)
            }
            Op::Sum(a) => Ok(Tensor::scalar(self.tensor(*a)?.data().iter().sum())),
            Op::Mean(a) => {
                let t = self.tensor(*a)?;
                Ok(Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64))
            }
            Op::MeanRows(a) => {
                let t = self.tensor(*a)?;
                let (n, d) = t.dims2();
                let mut out = vec![0.0; d];
                for i in 0..n {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += t.row(i)[j];
                    }
                }
                for o in out.iter_mut() {
                    *o /= n as f64;
                }
                Ok(Tensor::vector(out))
            }
            Op::AddRowVec(a, b) => self.rowvec_binary("add-row-vec", *a, *b, |x, y| x + y),
            Op::MulRowVec(a, b) => self.rowvec_binary("mul-row-vec", *a, *b, |x, y| x * y),
            Op::Exp(a) => Ok(self.tensor(*a)?.map(f64::exp)),
            Op::Log(a) => Ok(self.tensor(*a)?.map(f64::ln)),
            Op::Tanh(a) => Ok(self.tensor(*a)?.map(f64::tanh)),
            Op::Sigmoid(a) => Ok(self.tensor(*a)?.map(sigmoid)),
            Op::Abs(a) => Ok(self.tensor(*a)?.map(f64::abs)),
            Op::SoftmaxRows(a) => Ok(softmax_rows(self.tensor(*a)?)),
            Op::NormalizeRows(a) => {
                let t = self.tensor(*a)?;
                let (n, d) = t.dims2();
                let mut out = Vec::with_capacity(n * d);
                for i in 0..n {
                    let row = t.row(i);
                    let s: f64 = row.iter().sum();
                    if s == 0.0 {
                        return Err(GraphError::Invalid(format!(
                            "normalize-rows: zero row sum at row {i}"
                        )));
                    }
                    out.extend(row.iter().map(|&v| v / s));
                }
                Tensor::new(t.shape().to_vec(), out).map_err(|e| shape_err("normalize-rows", e.to_string()))
            }
            Op::LayerNormRows(a) => {
                let t = self.tensor(*a)?;
                let (n, d) = t.dims2();
                let mut out = Vec::with_capacity(n * d);
                for i in 0..n {
                    let row = t.row(i);
                    let mu: f64 = row.iter().sum::<f64>() / d as f64;
                    let var: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    out.extend(row.iter().map(|&v| (v - mu) * inv));
                }
                Tensor::new(t.shape().to_vec(), out).map_err(|e| shape_err("layer-norm", e.to_string()))
            }
            Op::AttnScores { q, k, heads } => self.attn_scores(*q, *k, *heads),
            Op::AttnContext { probs, v, heads } => self.attn_context(*probs, *v, *heads),
            Op::CrossEntropyRows(a, targets) => self.cross_entropy(*a, targets),
            Op::BceLoss(a, labels) => self.bce(*a, labels),
        }
    }

    fn ew_binary(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, GraphError> {
        let (ta, tb) = (self.tensor(a)?, self.tensor(b)?);
        if ta.shape() != tb.shape() && tb.is_scalar() {
            let s = tb.scalar_value();
            return Ok(ta.map(|x| f(x, s)));
        }
        ta.zip(tb, f).map_err(|e| shape_err(op, e.to_string()))
    }

    fn rowvec_binary(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, GraphError> {
        let (ta, tb) = (self.tensor(a)?, self.tensor(b)?);
        let (n, d) = ta.dims2();
        if tb.len() != d {
            return Err(shape_err(
                op,
                format!("matrix {:?} vs row vector {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            out.extend(ta.row(i).iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(ta.shape().to_vec(), out).map_err(|e| shape_err(op, e.to_string()))
    }

    fn concat_rows(&self, ids: &[NodeId]) -> Result<Tensor, GraphError> {
        if ids.is_empty() {
            return Err(GraphError::Invalid("concat-rows of zero tensors".into()));
        }
        let cols = self.tensor(ids[0])?.dims2().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &id in ids {
            let t = self.tensor(id)?;
            let (r, c) = t.dims2();
            if c != cols {
                return Err(shape_err(
                    "concat-rows",
                    format!("column count {c} != {cols}"),
                ));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        Tensor::matrix(rows, cols, data).map_err(|e| shape_err("concat-rows", e.to_string()))
    }

    fn concat_cols(&self, ids: &[NodeId]) -> Result<Tensor, GraphError> {
        if ids.is_empty() {
            return Err(GraphError::Invalid("concat-cols of zero tensors".into()));
        }
        let rows = self.tensor(ids[0])?.dims2().0;
        let mut widths = Vec::with_capacity(ids.len());
        for &id in ids {
            let (r, c) = self.tensor(id)?.dims2();
            if r != rows {
                return Err(shape_err("concat-cols", format!("row count {r} != {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&id, _) in ids.iter().zip(&widths) {
                data.extend_from_slice(self.tensor(id)?.row(i));
            }
        }
        Tensor::matrix(rows, total, data).map_err(|e| shape_err("concat-cols", e.to_string()))
    }

    fn gather_rows(&self, a: NodeId, idx: &[usize]) -> Result<Tensor, GraphError> {
        let t = self.tensor(a)?;
        let (n, d) = t.dims2();
        if idx.is_empty() {
            return Err(GraphError::Invalid("gather-rows with empty index".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(shape_err(
                    "gather-rows",
                    format!("row index {i} out of range for {n} rows"),
                ));
            }
            data.extend_from_slice(t.row(i));
        }
        Tensor::matrix(idx.len(), d, data).map_err(|e| shape_err("gather-rows", e.to_string()))
    }

    fn slice_block(
        &self,
        x: NodeId,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Result<Tensor, GraphError> {
        let t = self.tensor(x)?;
        let (n, d) = t.dims2();
        if row0 + rows > n || col0 + cols > d {
            return Err(shape_err(
                "slice-block",
                format!("block {row0}+{rows} x {col0}+{cols} exceeds {n} x {d}"),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            data.extend_from_slice(&t.row(i)[col0..col0 + cols]);
        }
        Tensor::matrix(rows, cols, data).map_err(|e| shape_err("slice-block", e.to_string()))
    }

    fn attn_scores(&self, q: NodeId, k: NodeId, heads: usize) -> Result<Tensor, GraphError> {
        let (tq, tk) = (self.tensor(q)?, self.tensor(k)?);
        let (n, d) = tq.dims2();
        let (m, dk) = tk.dims2();
        if d != dk || heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attn-scores",
                format!("q {:?}, k {:?}, heads {heads}", tq.shape(), tk.shape()),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; heads * n * m];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qrow = &tq.row(i)[off..off + dh];
                let orow = &mut out[(h * n + i) * m..(h * n + i + 1) * m];
                for (j, o) in orow.iter_mut().enumerate() {
                    let krow = &tk.row(j)[off..off + dh];
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += qrow[c] * krow[c];
                    }
                    *o = s * scale;
                }
            }
        }
        Tensor::matrix(heads * n, m, out).map_err(|e| shape_err("attn-scores", e.to_string()))
    }

    fn attn_context(&self, probs: NodeId, v: NodeId, heads: usize) -> Result<Tensor, GraphError> {
        let (tp, tv) = (self.tensor(probs)?, self.tensor(v)?);
        let (hn, m) = tp.dims2();
        let (mv, d) = tv.dims2();
        if m != mv || heads == 0 || hn % heads != 0 || d % heads != 0 {
            return Err(shape_err(
                "attn-context",
                format!("probs {:?}, v {:?}, heads {heads}", tp.shape(), tv.shape()),
            ));
        }
        let n = hn / heads;
        let dh = d / heads;
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let prow = tp.row(h * n + i);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in prow.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vrow = &tv.row(j)[off..off + dh];
                    for c in 0..dh {
                        orow[c] += p * vrow[c];
                    }
                }
            }
        }
        Tensor::matrix(n, d, out).map_err(|e| shape_err("attn-context", e.to_string()))
    }

    fn cross_entropy(&self, a: NodeId, targets: &[usize]) -> Result<Tensor, GraphError> {
        let t = self.tensor(a)?;
        let (n, d) = t.dims2();
        if targets.len() != n {
            return Err(shape_err(
                "cross-entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        let mut total = 0.0;
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt >= d {
                return Err(shape_err(
                    "cross-entropy",
                    format!("target {tgt} out of range for {d} classes"),
                ));
            }
            let row = t.row(i);
            total += log_sum_exp(row) - row[tgt];
        }
        Ok(Tensor::scalar(total / n as f64))
    }

    fn bce(&self, a: NodeId, labels: &[f64]) -> Result<Tensor, GraphError> {
        let t = self.tensor(a)?;
        if labels.len() != t.len() {
            return Err(shape_err(
                "bce-loss",
                format!("{} labels for {} probabilities", labels.len(), t.len()),
            ));
        }
        let mut total = 0.0;
        for (&p, &y) in t.data().iter().zip(labels) {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        Ok(Tensor::scalar(total / labels.len() as f64))
    }

    /// Reverse-mode gradient accumulation from a scalar loss node. Every
    /// parameter registered on the graph gets an entry; parameters the loss
    /// does not depend on get exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap, GraphError> {
        let loss_node = self.nodes.get(loss).ok_or(GraphError::InvalidNode(loss))?;
        if !loss_node.value.is_scalar() {
            return Err(GraphError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if node.param_name.is_some() {
                grads[id] = Some(g);
                continue;
            }
            self.accumulate(&node.op, id, &g, &mut grads)?;
        }

        let mut map = GradientMap::new();
        for (name, &id) in &self.param_ids {
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape().to_vec()));
            map.insert(name.clone(), g);
        }
        Ok(map)
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate(
        &self,
        op: &Op,
        out_id: NodeId,
        g: &Tensor,
        grads: &mut Vec<Option<Tensor>>,
    ) -> Result<(), GraphError> {
        match op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, self.reduce_for(*b, g));
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, self.reduce_for(*b, &g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if ta.shape() != tb.shape() && tb.is_scalar() {
                    let s = tb.scalar_value();
                    self.add_grad(grads, *a, g.map(|x| x * s));
                    let dot: f64 = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).sum();
                    self.add_grad(grads, *b, self.shape_like(*b, vec![dot]));
                } else {
                    self.add_grad(grads, *a, g.zip(tb, |x, y| x * y).unwrap());
                    self.add_grad(grads, *b, g.zip(ta, |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, c) => self.add_grad(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a, _) => self.add_grad(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut ga = g.matmul(&tb.transpose()).unwrap();
                // keep 1-D operand gradients 1-D
                if ta.shape().len() == 1 {
                    ga = Tensor::vector(ga.data().to_vec());
                }
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, ta.transpose().matmul(g).unwrap());
            }
            Op::Transpose(a) => self.add_grad(grads, *a, g.transpose()),
            Op::ConcatRows(ids) => {
                let mut row = 0;
                let (_, cols) = g.dims2();
                for &id in ids {
                    let t = &self.nodes[id].value;
                    let (r, _) = t.dims2();
                    let mut data = Vec::with_capacity(r * cols);
                    for i in row..row + r {
                        data.extend_from_slice(g.row(i));
                    }
                    row += r;
                    self.add_grad(
                        grads,
                        id,
                        Tensor::new(t.shape().to_vec(), data).unwrap(),
                    );
                }
            }
            Op::ConcatCols(ids) => {
                let (rows, _) = g.dims2();
                let mut col = 0;
                for &id in ids {
                    let t = &self.nodes[id].value;
                    let (_, c) = t.dims2();
                    let mut data = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        data.extend_from_slice(&g.row(i)[col..col + c]);
                    }
                    col += c;
                    self.add_grad(
                        grads,
                        id,
                        Tensor::new(t.shape().to_vec(), data).unwrap(),
                    );
                }
            }
            Op::GatherRows(a, idx) => {
                let t = &self.nodes[*a].value;
                let (_, d) = t.dims2();
                let mut acc = Tensor::zeros(t.shape().to_vec());
                for (out_row, &src_row) in idx.iter().enumerate() {
                    let grow = g.row(out_row);
                    let arow = &mut acc.data_mut()[src_row * d..(src_row + 1) * d];
                    for (av, &gv) in arow.iter_mut().zip(grow) {
                        *av += gv;
                    }
                }
                self.add_grad(grads, *a, acc);
            }
            Op::SliceBlock { x, row0, rows, col0, cols } => {
                let t = &self.nodes[*x].value;
                let (_, d) = t.dims2();
                let mut acc = Tensor::zeros(t.shape().to_vec());
                for i in 0..*rows {
                    let grow = g.row(i);
                    let dst = &mut acc.data_mut()
                        [(row0 + i) * d + col0..(row0 + i) * d + col0 + cols];
                    for (av, &gv) in dst.iter_mut().zip(grow) {
                        *av += gv;
                    }
                }
                self.add_grad(grads, *x, acc);
            }
            Op::Sum(a) => {
                let t = &self.nodes[*a].value;
                let gv = g.scalar_value();
                self.add_grad(grads, *a, Tensor::full(t.shape().to_vec(), gv));
            }
            Op::Mean(a) => {
                let t = &self.nodes[*a].value;
                let gv = g.scalar_value() / t.len() as f64;
                self.add_grad(grads, *a, Tensor::full(t.shape().to_vec(), gv));
            }
            Op::MeanRows(a) => {
                let t = &self.nodes[*a].value;
                let (n, d) = t.dims2();
                let mut data = Vec::with_capacity(n * d);
                for _ in 0..n {
                    data.extend(g.data().iter().map(|&v| v / n as f64));
                }
                self.add_grad(grads, *a, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::AddRowVec(a, b) => {
                self.add_grad(grads, *a, g.clone());
                let (n, d) = g.dims2();
                let mut acc = vec![0.0; d];
                for i in 0..n {
                    for (av, &gv) in acc.iter_mut().zip(g.row(i)) {
                        *av += gv;
                    }
                }
                self.add_grad(grads, *b, self.shape_like(*b, acc));
            }
            Op::MulRowVec(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, d) = ta.dims2();
                let mut ga = Vec::with_capacity(n * d);
                let mut gb = vec![0.0; d];
                for i in 0..n {
                    let (arow, grow) = (ta.row(i), g.row(i));
                    for j in 0..d {
                        ga.push(grow[j] * tb.data()[j]);
                        gb[j] += grow[j] * arow[j];
                    }
                }
                self.add_grad(grads, *a, Tensor::new(ta.shape().to_vec(), ga).unwrap());
                self.add_grad(grads, *b, self.shape_like(*b, gb));
            }
            Op::Exp(a) => {
                let y = &self.nodes[out_id].value;
                self.add_grad(grads, *a, g.zip(y, |gv, yv| gv * yv).unwrap());
            }
            Op::Log(a) => {
                let x = &self.nodes[*a].value;
                self.add_grad(grads, *a, g.zip(x, |gv, xv| gv / xv).unwrap());
            }
            Op::Tanh(a) => {
                let y = &self.nodes[out_id].value;
                self.add_grad(grads, *a, g.zip(y, |gv, yv| gv * (1.0 - yv * yv)).unwrap());
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[out_id].value;
                self.add_grad(grads, *a, g.zip(y, |gv, yv| gv * yv * (1.0 - yv)).unwrap());
            }
            Op::Abs(a) => {
                let x = &self.nodes[*a].value;
                self.add_grad(grads, *a, g.zip(x, |gv, xv| gv * xv.signum()).unwrap());
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[out_id].value;
                let (n, d) = y.dims2();
                let mut data = Vec::with_capacity(n * d);
                for i in 0..n {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(&p, &gv)| p * gv).sum();
                    data.extend(yr.iter().zip(gr).map(|(&p, &gv)| p * (gv - dot)));
                }
                self.add_grad(
                    grads,
                    *a,
                    Tensor::new(y.shape().to_vec(), data).unwrap(),
                );
            }
            Op::NormalizeRows(a) => {
                let x = &self.nodes[*a].value;
                let y = &self.nodes[out_id].value;
                let (n, d) = x.dims2();
                let mut data = Vec::with_capacity(n * d);
                for i in 0..n {
                    let s: f64 = x.row(i).iter().sum();
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    data.extend(gr.iter().map(|&gv| (gv - dot) / s));
                }
                self.add_grad(grads, *a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::LayerNormRows(a) => {
                let x = &self.nodes[*a].value;
                let y = &self.nodes[out_id].value;
                let (n, d) = x.dims2();
                let mut data = Vec::with_capacity(n * d);
                for i in 0..n {
                    let row = x.row(i);
                    let mu: f64 = row.iter().sum::<f64>() / d as f64;
                    let var: f64 =
                        row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let (yr, gr) = (y.row(i), g.row(i));
                    let gmean: f64 = gr.iter().sum::<f64>() / d as f64;
                    let gy: f64 =
                        gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum::<f64>() / d as f64;
                    data.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&gv, &yv)| inv * (gv - gmean - yv * gy)),
                    );
                }
                self.add_grad(grads, *a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::AttnScores { q, k, heads } => {
                let (tq, tk) = (&self.nodes[*q].value, &self.nodes[*k].value);
                let (n, d) = tq.dims2();
                let (_m, _) = tk.dims2();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(tq.shape().to_vec());
                let mut gk = Tensor::zeros(tk.shape().to_vec());
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let grow = g.row(h * n + i);
                        let qrow = &tq.row(i)[off..off + dh];
                        for (j, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let s = gv * scale;
                            let krow = &tk.row(j)[off..off + dh];
                            let gq_row = &mut gq.data_mut()[i * d + off..i * d + off + dh];
                            for c in 0..dh {
                                gq_row[c] += s * krow[c];
                            }
                            let gk_row = &mut gk.data_mut()[j * d + off..j * d + off + dh];
                            for (c, &qv) in qrow.iter().enumerate() {
                                gk_row[c] += s * qv;
                            }
                        }
                    }
                }
                self.add_grad(grads, *q, gq);
                self.add_grad(grads, *k, gk);
            }
            Op::AttnContext { probs, v, heads } => {
                let (tp, tv) = (&self.nodes[*probs].value, &self.nodes[*v].value);
                let (hn, m) = tp.dims2();
                let (_, d) = tv.dims2();
                let n = hn / heads;
                let dh = d / heads;
                let mut gp = Tensor::zeros(tp.shape().to_vec());
                let mut gv_acc = Tensor::zeros(tv.shape().to_vec());
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let grow = &g.row(i)[off..off + dh];
                        let prow = tp.row(h * n + i);
                        let gprow =
                            &mut gp.data_mut()[(h * n + i) * m..(h * n + i + 1) * m];
                        for j in 0..m {
                            let vrow = &tv.row(j)[off..off + dh];
                            let mut s = 0.0;
                            for c in 0..dh {
                                s += grow[c] * vrow[c];
                            }
                            gprow[j] += s;
                            let p = prow[j];
                            if p != 0.0 {
                                let gvrow =
                                    &mut gv_acc.data_mut()[j * d + off..j * d + off + dh];
                                for c in 0..dh {
                                    gvrow[c] += p * grow[c];
                                }
                            }
                        }
                    }
                }
                self.add_grad(grads, *probs, gp);
                self.add_grad(grads, *v, gv_acc);
            }
            Op::CrossEntropyRows(a, targets) => {
                let x = &self.nodes[*a].value;
                let (n, d) = x.dims2();
                let gv = g.scalar_value() / n as f64;
                let mut p = softmax_rows(x);
                for (i, &tgt) in targets.iter().enumerate() {
                    p.data_mut()[i * d + tgt] -= 1.0;
                }
                self.add_grad(grads, *a, p.map(|v| v * gv));
            }
            Op::BceLoss(a, labels) => {
                let x = &self.nodes[*a].value;
                let gv = g.scalar_value() / labels.len() as f64;
                let mut data = Vec::with_capacity(x.len());
                for (&p, &y) in x.data().iter().zip(labels) {
                    if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                        // clamped region: flat in p
                        data.push(0.0);
                    } else {
                        data.push(gv * (p - y) / (p * (1.0 - p)));
                    }
                }
                self.add_grad(grads, *a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
        }
        Ok(())
    }

    fn reduce_for(&self, id: NodeId, g: &Tensor) -> Tensor {
        let t = &self.nodes[id].value;
        if t.shape() == g.shape() {
            g.clone()
        } else {
            debug_assert!(t.is_scalar());
            Tensor::new(t.shape().to_vec(), vec![g.data().iter().sum()]).unwrap()
        }
    }

    fn shape_like(&self, id: NodeId, data: Vec<f64>) -> Tensor {
        let shape = self.nodes[id].value.shape().to_vec();
        Tensor::new(shape, data).unwrap()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let (n, d) = t.dims2();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = t.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        data.extend(exps.into_iter().map(|e| e / s));
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}
