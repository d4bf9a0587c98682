//! Reverse-mode differentiation over a recorded tape.
//!
//! Every primitive the model needs is a variant of [`Op`]. Forward values are
//! computed by [`forward_op`] and recorded on the [`Tape`] together with parent
//! indices, so a tape can be replayed to reproduce forward values bit-identically
//! and walked backwards to accumulate gradients. The scan primitive stores its
//! per-step hidden states on the node (no recomputation in backward).

use std::collections::HashMap;

use crate::error::{Result, SsmError};
use crate::tensor::{sigmoid, softplus, Tensor};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

/// Recorded primitive. Parent node ids are stored inline.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    /// Elementwise add; rhs may broadcast over leading dims.
    Add(NodeId, NodeId),
    /// Elementwise multiply; rhs may broadcast over leading dims.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Row-wise softmax over the trailing dim.
    Softmax(NodeId),
    LogSoftmax(NodeId),
    /// Full reduction to a scalar.
    Mean(NodeId),
    Sum(NodeId),
    /// T×d -> 1×d mean over rows.
    MeanRows(NodeId),
    /// Columns [lo, hi) of a 2-D tensor.
    SliceCols(NodeId, usize, usize),
    /// Single flat element -> [1].
    Select(NodeId, usize),
    /// Rows of a 2-D tensor by index (embedding lookup).
    Gather(NodeId, Vec<usize>),
    /// Causal depthwise conv: y[t] = b + sum_j w[j] ⊙ x[t-j], x[<0] = 0.
    Conv1dDepthwise { x: NodeId, w: NodeId, b: NodeId },
    /// Row-wise layer norm, no affine.
    LayerNorm(NodeId),
    /// Selective scan. x,delta: T×d_inner; a: d_inner×d_state; b,c: T×d_state.
    /// Output y: T×d_inner with y[t,m] = sum_n c[t,n]·h[t,m,n].
    SsmScan {
        x: NodeId,
        delta: NodeId,
        a: NodeId,
        b: NodeId,
        c: NodeId,
    },
    /// Tensor times a 1-element tensor.
    MulScalar(NodeId, NodeId),
    /// Forward identity; backward multiplies gradients by the factor.
    GradScale(NodeId, f64),
    /// Mean negative log-likelihood over scored positions.
    /// logp: T×V log-probabilities; targets[i] is the class scored at positions[i].
    NllMean {
        logp: NodeId,
        targets: Vec<usize>,
        positions: Vec<usize>,
    },
}

impl Op {
    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::MulScalar(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::SliceCols(a, _, _)
            | Op::Select(a, _)
            | Op::Gather(a, _)
            | Op::LayerNorm(a)
            | Op::GradScale(a, _) => vec![*a],
            Op::Conv1dDepthwise { x, w, b } => vec![*x, *w, *b],
            Op::SsmScan { x, delta, a, b, c } => vec![*x, *delta, *a, *b, *c],
            Op::NllMean { logp, .. } => vec![*logp],
        }
    }
}

/// Extra forward state kept by a node (scan hidden states).
#[derive(Debug, Clone)]
pub struct Aux {
    /// T×d_inner×d_state hidden states of a scan node.
    pub hidden: Tensor,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    pub aux: Option<Aux>,
}

#[derive(Debug, Default)]
pub struct Tape {
    pub nodes: Vec<Node>,
}

fn bcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

/// Sum `g` (shaped like lhs) down to `shape` (a trailing suffix of lhs).
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = Tensor::zeros(shape);
    for (i, &v) in g.data.iter().enumerate() {
        out.data[i % n] += v;
    }
    out
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data[i * n + j] += av * b.data[p * n + j];
            }
        }
    }
    out
}

fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data[j * m + i] = a.data[i * n + j];
        }
    }
    out
}

/// Row view helper: trailing dim as columns, everything else as rows.
fn as_rows(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("rank >= 1");
    let rows = shape.iter().product::<usize>() / cols;
    (rows, cols)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = as_rows(&x.shape);
    let mut out = Tensor::zeros(&x.shape);
    for r in 0..rows {
        let row = &x.data[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out.data[r * cols + j] = e;
            z += e;
        }
        for j in 0..cols {
            out.data[r * cols + j] /= z;
        }
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = as_rows(&x.shape);
    let mut out = Tensor::zeros(&x.shape);
    for r in 0..rows {
        let row = &x.data[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
        for j in 0..cols {
            out.data[r * cols + j] = row[j] - lse;
        }
    }
    out
}

/// Forward semantics of every primitive. Deterministic for fixed inputs.
pub fn forward_op(op: &Op, values: &[&Tensor]) -> Result<(Tensor, Option<Aux>)> {
    let out = match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(_, _) => {
            let (a, b) = (values[0], values[1]);
            if !bcast_ok(&a.shape, &b.shape) {
                return Err(SsmError::ShapeMismatch {
                    op: "add",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let n = b.len();
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| v + b.data[i % n])
                .collect();
            Tensor::new(a.shape.clone(), data)
        }
        Op::Mul(_, _) => {
            let (a, b) = (values[0], values[1]);
            if !bcast_ok(&a.shape, &b.shape) {
                return Err(SsmError::ShapeMismatch {
                    op: "mul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let n = b.len();
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| v * b.data[i % n])
                .collect();
            Tensor::new(a.shape.clone(), data)
        }
        Op::Scale(_, c) => values[0].map(|v| v * c),
        Op::Neg(_) => values[0].map(|v| -v),
        Op::Exp(_) => values[0].map(f64::exp),
        Op::Log(_) => values[0].map(f64::ln),
        Op::Softplus(_) => values[0].map(softplus),
        Op::Sigmoid(_) => values[0].map(sigmoid),
        Op::Relu(_) => values[0].map(|v| v.max(0.0)),
        Op::Abs(_) => values[0].map(f64::abs),
        Op::MatMul(_, _) => {
            let (a, b) = (values[0], values[1]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(SsmError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            matmul(a, b)
        }
        Op::Transpose(_) => {
            let a = values[0];
            if a.shape.len() != 2 {
                return Err(SsmError::ShapeMismatch {
                    op: "transpose",
                    lhs: a.shape.clone(),
                    rhs: vec![],
                });
            }
            transpose(a)
        }
        Op::Softmax(_) => softmax_rows(values[0]),
        Op::LogSoftmax(_) => log_softmax_rows(values[0]),
        Op::Mean(_) => Tensor::scalar(values[0].data.iter().sum::<f64>() / values[0].len() as f64),
        Op::Sum(_) => Tensor::scalar(values[0].data.iter().sum()),
        Op::MeanRows(_) => {
            let x = values[0];
            let (rows, cols) = as_rows(&x.shape);
            let mut out = Tensor::zeros(&[1, cols]);
            for r in 0..rows {
                for j in 0..cols {
                    out.data[j] += x.data[r * cols + j];
                }
            }
            for v in &mut out.data {
                *v /= rows as f64;
            }
            out
        }
        Op::SliceCols(_, lo, hi) => {
            let x = values[0];
            let (rows, cols) = as_rows(&x.shape);
            assert!(*lo < *hi && *hi <= cols, "slice [{lo},{hi}) of {cols} cols");
            let w = hi - lo;
            let mut out = Tensor::zeros(&[rows, w]);
            for r in 0..rows {
                out.data[r * w..(r + 1) * w]
                    .copy_from_slice(&x.data[r * cols + lo..r * cols + hi]);
            }
            out
        }
        Op::Select(_, idx) => {
            let x = values[0];
            if *idx >= x.len() {
                return Err(SsmError::DimOutOfRange {
                    dim: *idx,
                    width: x.len(),
                });
            }
            Tensor::scalar(x.data[*idx])
        }
        Op::Gather(_, ids) => {
            let m = values[0];
            let cols = m.shape[1];
            let mut out = Tensor::zeros(&[ids.len(), cols]);
            for (r, &id) in ids.iter().enumerate() {
                if id >= m.shape[0] {
                    return Err(SsmError::OutOfVocab {
                        token: id,
                        position: r,
                    });
                }
                out.data[r * cols..(r + 1) * cols]
                    .copy_from_slice(&m.data[id * cols..(id + 1) * cols]);
            }
            out
        }
        Op::Conv1dDepthwise { .. } => {
            let (x, w, b) = (values[0], values[1], values[2]);
            let (t_len, d) = (x.shape[0], x.shape[1]);
            let k = w.shape[0];
            if w.shape[1] != d || b.shape != vec![d] {
                return Err(SsmError::ShapeMismatch {
                    op: "conv1d",
                    lhs: x.shape.clone(),
                    rhs: w.shape.clone(),
                });
            }
            let mut out = Tensor::zeros(&[t_len, d]);
            for t in 0..t_len {
                for ch in 0..d {
                    let mut acc = b.data[ch];
                    for j in 0..k.min(t + 1) {
                        acc += w.data[j * d + ch] * x.data[(t - j) * d + ch];
                    }
                    out.data[t * d + ch] = acc;
                }
            }
            out
        }
        Op::LayerNorm(_) => {
            let x = values[0];
            let (rows, cols) = as_rows(&x.shape);
            let mut out = Tensor::zeros(&x.shape);
            for r in 0..rows {
                let row = &x.data[r * cols..(r + 1) * cols];
                let mu = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for j in 0..cols {
                    out.data[r * cols + j] = (row[j] - mu) * inv;
                }
            }
            out
        }
        Op::SsmScan { .. } => {
            let (x, delta, a, b, c) = (values[0], values[1], values[2], values[3], values[4]);
            return ssm_scan_forward(x, delta, a, b, c);
        }
        Op::MulScalar(_, _) => {
            let (x, s) = (values[0], values[1]);
            if s.len() != 1 {
                return Err(SsmError::ShapeMismatch {
                    op: "mul_scalar",
                    lhs: x.shape.clone(),
                    rhs: s.shape.clone(),
                });
            }
            x.map(|v| v * s.data[0])
        }
        Op::GradScale(_, _) => values[0].clone(),
        Op::NllMean {
            targets, positions, ..
        } => {
            let logp = values[0];
            let cols = *logp.shape.last().unwrap();
            assert_eq!(targets.len(), positions.len());
            if positions.is_empty() {
                return Err(SsmError::EmptyInput("nll_mean"));
            }
            let mut acc = 0.0;
            for (i, &t) in positions.iter().enumerate() {
                acc -= logp.data[t * cols + targets[i]];
            }
            Tensor::scalar(acc / positions.len() as f64)
        }
    };
    Ok((out, None))
}

fn ssm_scan_forward(
    x: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
) -> Result<(Tensor, Option<Aux>)> {
    let (t_len, d_inner) = (x.shape[0], x.shape[1]);
    let d_state = a.shape[1];
    if delta.shape != x.shape
        || a.shape != vec![d_inner, d_state]
        || b.shape != vec![t_len, d_state]
        || c.shape != vec![t_len, d_state]
    {
        return Err(SsmError::ShapeMismatch {
            op: "ssm_scan",
            lhs: x.shape.clone(),
            rhs: a.shape.clone(),
        });
    }
    for t in 0..t_len {
        for m in 0..d_inner {
            if delta.at2(t, m) <= 0.0 {
                return Err(SsmError::NonPositiveDelta { t, channel: m });
            }
        }
    }
    let mut h = Tensor::zeros(&[t_len, d_inner, d_state]);
    let mut y = Tensor::zeros(&[t_len, d_inner]);
    for t in 0..t_len {
        for m in 0..d_inner {
            let dt = delta.at2(t, m);
            let xv = x.at2(t, m);
            let mut acc = 0.0;
            for n in 0..d_state {
                let a_bar = (dt * a.at2(m, n)).exp();
                // strictly inside (0,1) mathematically; either boundary
                // can appear when dt·a under/overflows the exp, which is
                // still a valid contraction
                debug_assert!(
                    (0.0..=1.0).contains(&a_bar),
                    "A_bar out of [0,1]: {a_bar} at t={t} m={m} n={n}"
                );
                let prev = if t == 0 { 0.0 } else { h.at3(t - 1, m, n) };
                let hv = a_bar * prev + dt * b.at2(t, n) * xv;
                h.set3(t, m, n, hv);
                acc += c.at2(t, n) * hv;
            }
            if acc.is_nan() {
                return Err(SsmError::NanInScan { t, channel: m });
            }
            y.set2(t, m, acc);
        }
    }
    Ok((y, Some(Aux { hidden: h })))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            aux: None,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn aux(&self, id: NodeId) -> Option<&Aux> {
        self.nodes[id].aux.as_ref()
    }

    pub fn push(&mut self, op: Op) -> Result<NodeId> {
        let parents = op.parents();
        let values: Vec<&Tensor> = parents.iter().map(|&p| &self.nodes[p].value).collect();
        let (value, aux) = forward_op(&op, &values)?;
        self.nodes.push(Node { op, value, aux });
        Ok(self.nodes.len() - 1)
    }

    // Convenience builders.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Neg(a))
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softplus(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }
    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        self.push(Op::SliceCols(a, lo, hi))
    }
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.push(Op::MulScalar(a, s))
    }

    /// Silu(x) = x · sigmoid(x).
    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.sigmoid(a)?;
        self.mul(a, s)
    }

    /// Recompute every node value from the recorded ops, in order.
    /// Returns the recomputed values (bit-identical to the stored ones).
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => {
                    let parents = op.parents();
                    let refs: Vec<&Tensor> = parents.iter().map(|&p| &values[p]).collect();
                    forward_op(op, &refs)?.0
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Gradients of a scalar output with respect to every node.
    pub fn backward(&self, output: NodeId) -> Result<Vec<Tensor>> {
        if output >= self.nodes.len() {
            return Err(SsmError::UnknownNode(output));
        }
        if self.nodes[output].value.len() != 1 {
            return Err(SsmError::NonScalarOutput(output));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(&n.value.shape))
            .collect();
        grads[output].data[0] = 1.0;

        for id in (0..=output).rev() {
            if grads[id].data.iter().all(|&v| v == 0.0) {
                continue;
            }
            let g = grads[id].clone();
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (i, &gv) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gv;
                    }
                    let gb = reduce_to(&g, &self.nodes[*b].value.shape.clone());
                    for (i, &gv) in gb.data.iter().enumerate() {
                        grads[*b].data[i] += gv;
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    let n = bv.len();
                    for (i, &gv) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gv * bv.data[i % n];
                    }
                    let mut gb_full = Tensor::zeros(&av.shape);
                    for (i, &gv) in g.data.iter().enumerate() {
                        gb_full.data[i] = gv * av.data[i];
                    }
                    let gb = reduce_to(&gb_full, &bv.shape);
                    for (i, &gv) in gb.data.iter().enumerate() {
                        grads[*b].data[i] += gv;
                    }
                }
                Op::Scale(a, c) => {
                    for (i, &gv) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gv * c;
                    }
                }
                Op::Neg(a) => {
                    for (i, &gv) in g.data.iter().enumerate() {
                        grads[*a].data[i] -= gv;
                    }
                }
                Op::Exp(a) => {
                    let v = &node.value;
                    for (i, &gv) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gv * v.data[i];
                    }
                }
                Op::Log(a) => {
                    let xv = self.nodes[*a].value.clone();
                    for (i, &gv) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gv / xv.data[i];
                    }
                }
                Op::Softplus(a) => {
                    let xv = self.nodes[*a].value.clone();
                    for (i, &gv) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gv * sigmoid(xv.data[i]);
                    }
                }
                Op::Sigmoid(a) => {
                    let v = &node.value;
                    for (i, &gv) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gv * v.data[i] * (1.0 - v.data[i]);
                    }
                }
                Op::Relu(a) => {
                    let xv = self.nodes[*a].value.clone();
                    for (i, &gv) in g.data.iter().enumerate() {
                        if xv.data[i] > 0.0 {
                            grads[*a].data[i] += gv;
                        }
                    }
                }
                Op::Abs(a) => {
                    let xv = self.nodes[*a].value.clone();
                    for (i, &gv) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gv * xv.data[i].signum() * (xv.data[i] != 0.0) as u8 as f64;
                    }
                }
                Op::MatMul(a, b) => {
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    let ga = matmul(&g, &transpose(&bv));
                    let gb = matmul(&transpose(&av), &g);
                    for (i, &gv) in ga.data.iter().enumerate() {
                        grads[*a].data[i] += gv;
                    }
                    for (i, &gv) in gb.data.iter().enumerate() {
                        grads[*b].data[i] += gv;
                    }
                }
                Op::Transpose(a) => {
                    let gt = transpose(&g);
                    for (i, &gv) in gt.data.iter().enumerate() {
                        grads[*a].data[i] += gv;
                    }
                }
                Op::Softmax(a) => {
                    let v = &node.value;
                    let (rows, cols) = as_rows(&v.shape);
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += g.data[r * cols + j] * v.data[r * cols + j];
                        }
                        for j in 0..cols {
                            grads[*a].data[r * cols + j] +=
                                v.data[r * cols + j] * (g.data[r * cols + j] - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let v = &node.value;
                    let (rows, cols) = as_rows(&v.shape);
                    for r in 0..rows {
                        let gsum: f64 = (0..cols).map(|j| g.data[r * cols + j]).sum();
                        for j in 0..cols {
                            let p = v.data[r * cols + j].exp();
                            grads[*a].data[r * cols + j] += g.data[r * cols + j] - p * gsum;
                        }
                    }
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len() as f64;
                    let gv = g.data[0] / n;
                    for x in &mut grads[*a].data {
                        *x += gv;
                    }
                }
                Op::Sum(a) => {
                    let gv = g.data[0];
                    for x in &mut grads[*a].data {
                        *x += gv;
                    }
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = as_rows(&self.nodes[*a].value.shape);
                    for r in 0..rows {
                        for j in 0..cols {
                            grads[*a].data[r * cols + j] += g.data[j] / rows as f64;
                        }
                    }
                }
                Op::SliceCols(a, lo, _hi) => {
                    let (rows, w) = (g.shape[0], g.shape[1]);
                    let cols = self.nodes[*a].value.shape[1];
                    for r in 0..rows {
                        for j in 0..w {
                            grads[*a].data[r * cols + lo + j] += g.data[r * w + j];
                        }
                    }
                }
                Op::Select(a, idx) => {
                    grads[*a].data[*idx] += g.data[0];
                }
                Op::Gather(a, ids) => {
                    let cols = self.nodes[*a].value.shape[1];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            grads[*a].data[id * cols + j] += g.data[r * cols + j];
                        }
                    }
                }
                Op::Conv1dDepthwise { x, w, b } => {
                    let xv = self.nodes[*x].value.clone();
                    let wv = self.nodes[*w].value.clone();
                    let (t_len, d) = (xv.shape[0], xv.shape[1]);
                    let k = wv.shape[0];
                    for t in 0..t_len {
                        for ch in 0..d {
                            let gv = g.data[t * d + ch];
                            if gv == 0.0 {
                                continue;
                            }
                            grads[*b].data[ch] += gv;
                            for j in 0..k.min(t + 1) {
                                grads[*w].data[j * d + ch] += gv * xv.data[(t - j) * d + ch];
                                grads[*x].data[(t - j) * d + ch] += gv * wv.data[j * d + ch];
                            }
                        }
                    }
                }
                Op::LayerNorm(a) => {
                    let xv = self.nodes[*a].value.clone();
                    let yv = &node.value;
                    let (rows, cols) = as_rows(&xv.shape);
                    for r in 0..rows {
                        let row = &xv.data[r * cols..(r + 1) * cols];
                        let mu = row.iter().sum::<f64>() / cols as f64;
                        let var =
                            row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let gmean: f64 =
                            (0..cols).map(|j| g.data[r * cols + j]).sum::<f64>() / cols as f64;
                        let gydot: f64 = (0..cols)
                            .map(|j| g.data[r * cols + j] * yv.data[r * cols + j])
                            .sum::<f64>()
                            / cols as f64;
                        for j in 0..cols {
                            grads[*a].data[r * cols + j] += inv
                                * (g.data[r * cols + j] - gmean - yv.data[r * cols + j] * gydot);
                        }
                    }
                }
                Op::SsmScan { x, delta, a, b, c } => {
                    let xv = self.nodes[*x].value.clone();
                    let dv = self.nodes[*delta].value.clone();
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    let cv = self.nodes[*c].value.clone();
                    let h = node.aux.as_ref().expect("scan aux").hidden.clone();
                    let (t_len, d_inner) = (xv.shape[0], xv.shape[1]);
                    let d_state = av.shape[1];
                    // dL/dh via y and via the recurrence, walked backwards.
                    let mut gh = vec![0.0; d_inner * d_state];
                    for t in (0..t_len).rev() {
                        for m in 0..d_inner {
                            let gy = g.data[t * d_inner + m];
                            let dt = dv.at2(t, m);
                            let xvtm = xv.at2(t, m);
                            for n in 0..d_state {
                                let hi = m * d_state + n;
                                // y[t,m] = sum_n c[t,n] h[t,m,n]
                                gh[hi] += gy * cv.at2(t, n);
                                grads[*c].data[t * d_state + n] += gy * h.at3(t, m, n);
                            }
                            for n in 0..d_state {
                                let hi = m * d_state + n;
                                let ghv = gh[hi];
                                if ghv == 0.0 {
                                    continue;
                                }
                                let a_mn = av.at2(m, n);
                                let a_bar = (dt * a_mn).exp();
                                let prev = if t == 0 { 0.0 } else { h.at3(t - 1, m, n) };
                                // h[t] = a_bar·h[t-1] + dt·b[t,n]·x[t,m]
                                grads[*a].data[m * d_state + n] += ghv * prev * a_bar * dt;
                                grads[*delta].data[t * d_inner + m] +=
                                    ghv * (prev * a_bar * a_mn + bv.at2(t, n) * xvtm);
                                grads[*b].data[t * d_state + n] += ghv * dt * xvtm;
                                grads[*x].data[t * d_inner + m] += ghv * dt * bv.at2(t, n);
                                gh[hi] = ghv * a_bar;
                            }
                        }
                    }
                }
                Op::MulScalar(a, s) => {
                    let sv = self.nodes[*s].value.data[0];
                    let av = self.nodes[*a].value.clone();
                    let mut gs = 0.0;
                    for (i, &gv) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gv * sv;
                        gs += gv * av.data[i];
                    }
                    grads[*s].data[0] += gs;
                }
                Op::GradScale(a, factor) => {
                    for (i, &gv) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gv * factor;
                    }
                }
                Op::NllMean {
                    logp,
                    targets,
                    positions,
                } => {
                    let cols = *self.nodes[*logp].value.shape.last().unwrap();
                    let scale = g.data[0] / positions.len() as f64;
                    for (i, &t) in positions.iter().enumerate() {
                        grads[*logp].data[t * cols + targets[i]] -= scale;
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// ∂output/∂param for each requested leaf. Zero tensors for params the
/// output does not depend on.
pub fn gradient(
    tape: &Tape,
    output: NodeId,
    params: &[NodeId],
) -> Result<HashMap<NodeId, Tensor>> {
    for &p in params {
        if p >= tape.nodes.len() {
            return Err(SsmError::UnknownNode(p));
        }
    }
    let grads = tape.backward(output)?;
    Ok(params.iter().map(|&p| (p, grads[p].clone())).collect())
}

/// Max over all parameter entries of |analytic − central difference| / (|analytic| + 1e-12).
///
/// `build` constructs the scalar output from leaves registered for `params`,
/// in order. It is re-invoked for every perturbed evaluation.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    assert!(eps > 0.0, "eps must be positive");
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = build(&mut tape, &ids)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let grads = gradient(&tape, out, &ids)?;

    let mut max_err: f64 = 0.0;
    for (pi, param) in params.iter().enumerate() {
        let analytic = &grads[&ids[pi]];
        for ei in 0..param.len() {
            let mut plus = params.to_vec();
            plus[pi].data[ei] += eps;
            let mut minus = params.to_vec();
            minus[pi].data[ei] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let err = (analytic.data[ei] - numeric).abs() / (analytic.data[ei].abs() + 1e-12);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
