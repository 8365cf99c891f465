//! Reverse-mode automatic differentiation over an explicitly recorded
//! operation graph.
//!
//! A [`Tape`] is an append-only arena of nodes. Every op validates shapes at
//! recording time, computes its forward value immediately, and remembers just
//! enough to play the chain rule backwards. Parameters are leaf nodes keyed by
//! their [`ParamStore`] name; requesting the same name twice returns the same
//! node, so weight sharing and the summed gradients it implies fall out of the
//! graph structure.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

pub type NodeId = usize;

enum Op {
    /// Constant input; no gradient flows into it.
    Input,
    /// Trainable leaf identified by a store name.
    Param(String),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// `[r x c] + [c]`, bias broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RowSoftmax {
        x: NodeId,
        mask: Option<Vec<bool>>,
    },
    RowLogSoftmax(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        width: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// `y[i, j] = x[i, j] * w[i]`, `w` a per-row scalar column.
    ScaleRows {
        x: NodeId,
        w: NodeId,
    },
    /// `y.data[k] = x.data[idx[k]]`; scatter-add on the way back.
    Gather {
        x: NodeId,
        idx: Vec<usize>,
    },
    Sum(NodeId),
    Reshape(NodeId),
    /// CTC negative log-likelihood of `target` given row log-probabilities.
    CtcLoss {
        logp: NodeId,
        target: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite forward value");
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Trainable leaf backed by `store[name]`. One node per name per tape.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let value = store.value(name)?.clone();
        let id = self.push(value, Op::Param(name.to_string()), true);
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    fn rank2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op,
                shape: s.to_vec(),
                detail: "rank-2 tensor required".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = self.nodes[a].value.data();
        let bv = self.nodes[b].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2(a, "transpose")?;
        let av = self.nodes[a].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// Broadcast add of a bias vector over every row.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.rank2(x, "add_row")?;
        let bs = self.shape(bias);
        if bs != [c] && bs != [1, c] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let xv = self.nodes[x].value.data();
        let bv = self.nodes[bias].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xv[i * c + j] + bv[j];
            }
        }
        let rg = self.needs_grad(&[x, bias]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x].value.data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(Tensor::new(shape, out).unwrap(), Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x].value.data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(Tensor::new(shape, out).unwrap(), Op::Relu(x), rg)
    }

    /// `x W (+ bias)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Per-row normalization to zero mean / unit variance, then affine.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.rank2(x, "layer_norm")?;
        for other in [gamma, beta] {
            let s = self.shape(other);
            if s != [c] && s != [1, c] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![r, c],
                    rhs: s.to_vec(),
                });
            }
        }
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let xv = self.nodes[x].value.data();
        let gv = self.nodes[gamma].value.data();
        let bv = self.nodes[beta].value.data();
        let mut out = vec![0.0; r * c];
        let mut means = vec![0.0; r];
        let mut inv_stds = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            inv_stds[i] = inv_std;
            for j in 0..c {
                out[i * c + j] = gv[j] * (row[j] - mean) * inv_std + bv[j];
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
                mean: means,
                inv_std: inv_stds,
            },
            rg,
        ))
    }

    /// Row-wise softmax. Masked-out entries (mask `false`) get weight exactly 0;
    /// a fully masked row is a [`Error::DegenerateMask`].
    pub fn row_softmax(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (r, c) = self.rank2(x, "row_softmax")?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::InvalidShape {
                    op: "row_softmax",
                    shape: vec![m.len()],
                    detail: format!("mask length != {}", r * c),
                });
            }
            for i in 0..r {
                if !m[i * c..(i + 1) * c].iter().any(|&a| a) {
                    return Err(Error::DegenerateMask { row: i });
                }
            }
        }
        let xv = self.nodes[x].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let allowed = |j: usize| mask.map_or(true, |m| m[i * c + j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if allowed(j) {
                    max = max.max(xv[i * c + j]);
                }
            }
            let mut denom = 0.0;
            for j in 0..c {
                if allowed(j) {
                    let e = (xv[i * c + j] - max).exp();
                    out[i * c + j] = e;
                    denom += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= denom;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::RowSoftmax {
                x,
                mask: mask.map(<[bool]>::to_vec),
            },
            rg,
        ))
    }

    /// Row-wise log-softmax; rows of the output are normalized log-distributions.
    pub fn row_log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.rank2(x, "row_log_softmax")?;
        let xv = self.nodes[x].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::RowLogSoftmax(x), rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let (r, c) = self.rank2(x, "slice_cols")?;
        if start + width > c || width == 0 {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                shape: vec![r, c],
                detail: format!("slice {start}..{} out of range", start + width),
            });
        }
        let xv = self.nodes[x].value.data();
        let mut out = vec![0.0; r * width];
        for i in 0..r {
            out[i * width..(i + 1) * width]
                .copy_from_slice(&xv[i * c + start..i * c + start + width]);
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, width], out)?,
            Op::SliceCols { x, start, width },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let r = self.rank2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.rank2(p, "concat_cols")?;
            if rp != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(cp);
        }
        let c: usize = widths.iter().sum();
        let mut out = vec![0.0; r * c];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.nodes[p].value.data();
            for i in 0..r {
                out[i * c + off..i * c + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Scale each row of `x` by the matching entry of column vector `w`.
    pub fn scale_rows(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (r, c) = self.rank2(x, "scale_rows")?;
        let ws = self.shape(w);
        if ws != [r, 1] && ws != [r] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: vec![r, c],
                rhs: ws.to_vec(),
            });
        }
        let xv = self.nodes[x].value.data();
        let wv = self.nodes[w].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xv[i * c + j] * wv[i];
            }
        }
        let rg = self.needs_grad(&[x, w]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::ScaleRows { x, w }, rg))
    }

    /// Arbitrary index gather: `out.data[k] = x.data[idx[k]]`.
    pub fn gather(&mut self, x: NodeId, idx: Vec<usize>, out_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = out_shape.iter().product();
        if numel != idx.len() {
            return Err(Error::InvalidShape {
                op: "gather",
                shape: out_shape,
                detail: format!("index count {} != numel {}", idx.len(), numel),
            });
        }
        let xv = self.nodes[x].value.data();
        let n = xv.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidShape {
                op: "gather",
                shape: self.shape(x).to_vec(),
                detail: format!("index {bad} out of range {n}"),
            });
        }
        let out: Vec<f64> = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Gather { x, idx }, rg))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.rank2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidToken {
                id: bad,
                detail: format!("embedding table has {v} rows"),
            });
        }
        let mut idx = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            idx.extend(i * d..(i + 1) * d);
        }
        self.gather(table, idx, vec![ids.len(), d])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].value.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                detail: "element count changed".into(),
            });
        }
        let data = self.nodes[x].value.data().to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape(x), rg))
    }

    /// Mean cross-entropy of `targets` under row log-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (r, c) = self.rank2(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: vec![r, c],
                detail: format!("{} targets for {} rows", targets.len(), r),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidToken {
                id: bad,
                detail: format!("target outside vocabulary of {c}"),
            });
        }
        let logp = self.row_log_softmax(logits)?;
        let idx: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * c + t).collect();
        let picked = self.gather(logp, idx, vec![r, 1])?;
        let total = self.sum(picked);
        Ok(self.scale(total, -1.0 / r as f64))
    }

    /// CTC negative log-likelihood; `logp` rows must be log-distributions
    /// (e.g. from [`Tape::row_log_softmax`]). Exact gradient via the
    /// forward-backward recursion.
    pub fn ctc_loss_logp(&mut self, logp: NodeId, target: &[usize]) -> Result<NodeId> {
        let (t_len, v) = self.rank2(logp, "ctc_loss")?;
        for &l in target {
            if l == crate::ctc::BLANK || l >= v {
                return Err(Error::InvalidToken {
                    id: l,
                    detail: format!("CTC label must be in 1..{v}"),
                });
            }
        }
        let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
        if t_len < target.len() + repeats {
            return Err(Error::InfeasibleTarget {
                frames: t_len,
                labels: target.len(),
                repeats,
            });
        }
        let lp = self.nodes[logp].value.data();
        let alpha = ctc_alpha(lp, t_len, v, target);
        let s_len = 2 * target.len() + 1;
        let log_z = if s_len >= 2 {
            log_add(alpha[(t_len - 1) * s_len + s_len - 1], alpha[(t_len - 1) * s_len + s_len - 2])
        } else {
            alpha[(t_len - 1) * s_len]
        };
        let loss = -log_z;
        if !loss.is_finite() {
            return Err(Error::InfeasibleTarget {
                frames: t_len,
                labels: target.len(),
                repeats,
            });
        }
        let rg = self.needs_grad(&[logp]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CtcLoss {
                logp,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss` node. Returns per-parameter gradients
    /// keyed by store name, in deterministic (lexicographic) order.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.shape(loss).to_vec(),
                detail: "loss must be scalar".into(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.backward_node(id, &g, &mut adj);
            if matches!(self.nodes[id].op, Op::Param(_)) {
                adj[id] = Some(g);
            }
        }
        let mut grads = BTreeMap::new();
        for (name, &id) in &self.param_nodes {
            if let Some(g) = adj[id].take() {
                grads.insert(
                    name.clone(),
                    Tensor::new(self.shape(id).to_vec(), g).expect("gradient shape"),
                );
            }
        }
        Ok(grads)
    }

    fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = adj[id].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backward_node(&self, id: NodeId, g: &[f64], adj: &mut Vec<Option<Vec<f64>>>) {
        let val = |i: NodeId| self.nodes[i].value.data();
        let numel = |i: NodeId| self.nodes[i].value.numel();
        let rg = |i: NodeId| self.nodes[i].requires_grad;
        match &self.nodes[id].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if rg(*a) {
                    let bv = val(*b);
                    Self::accumulate(adj, *a, m * k, |da| {
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i * k + p] += gij * bv[p * n + j];
                                }
                            }
                        }
                    });
                }
                if rg(*b) {
                    let av = val(*a);
                    Self::accumulate(adj, *b, k * n, |db| {
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if rg(*a) {
                    Self::accumulate(adj, *a, m * n, |da| {
                        for i in 0..m {
                            for j in 0..n {
                                da[i * n + j] += g[j * m + i];
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if rg(i) {
                        Self::accumulate(adj, i, numel(i), |d| {
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += gv;
                            }
                        });
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if rg(*x) {
                    Self::accumulate(adj, *x, r * c, |d| {
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    });
                }
                if rg(*bias) {
                    Self::accumulate(adj, *bias, numel(*bias), |db| {
                        for i in 0..r {
                            for j in 0..c {
                                db[j] += g[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                if rg(*x) {
                    let c = *c;
                    Self::accumulate(adj, *x, numel(*x), |d| {
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += c * gv;
                        }
                    });
                }
            }
            Op::Relu(x) => {
                if rg(*x) {
                    let xv = val(*x);
                    Self::accumulate(adj, *x, numel(*x), |d| {
                        for i in 0..d.len() {
                            if xv[i] > 0.0 {
                                d[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps: _,
                mean,
                inv_std,
            } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = val(*x);
                let gv = val(*gamma);
                if rg(*gamma) {
                    Self::accumulate(adj, *gamma, c, |dg| {
                        for i in 0..r {
                            for j in 0..c {
                                let xhat = (xv[i * c + j] - mean[i]) * inv_std[i];
                                dg[j] += g[i * c + j] * xhat;
                            }
                        }
                    });
                }
                if rg(*beta) {
                    Self::accumulate(adj, *beta, c, |db| {
                        for i in 0..r {
                            for j in 0..c {
                                db[j] += g[i * c + j];
                            }
                        }
                    });
                }
                if rg(*x) {
                    Self::accumulate(adj, *x, r * c, |dx| {
                        for i in 0..r {
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for j in 0..c {
                                let dxhat = g[i * c + j] * gv[j];
                                let xhat = (xv[i * c + j] - mean[i]) * inv_std[i];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let cf = c as f64;
                            for j in 0..c {
                                let dxhat = g[i * c + j] * gv[j];
                                let xhat = (xv[i * c + j] - mean[i]) * inv_std[i];
                                dx[i * c + j] += inv_std[i]
                                    * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
                            }
                        }
                    });
                }
            }
            Op::RowSoftmax { x, mask: _ } => {
                if rg(*x) {
                    let y = self.nodes[id].value.data();
                    let (r, c) = (self.shape(id)[0], self.shape(id)[1]);
                    Self::accumulate(adj, *x, r * c, |dx| {
                        for i in 0..r {
                            let mut dot = 0.0;
                            for j in 0..c {
                                dot += g[i * c + j] * y[i * c + j];
                            }
                            for j in 0..c {
                                dx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                            }
                        }
                    });
                }
            }
            Op::RowLogSoftmax(x) => {
                if rg(*x) {
                    let y = self.nodes[id].value.data();
                    let (r, c) = (self.shape(id)[0], self.shape(id)[1]);
                    Self::accumulate(adj, *x, r * c, |dx| {
                        for i in 0..r {
                            let gsum: f64 = g[i * c..(i + 1) * c].iter().sum();
                            for j in 0..c {
                                dx[i * c + j] += g[i * c + j] - y[i * c + j].exp() * gsum;
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, start, width } => {
                if rg(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let (start, width) = (*start, *width);
                    Self::accumulate(adj, *x, r * c, |dx| {
                        for i in 0..r {
                            for j in 0..width {
                                dx[i * c + start + j] += g[i * width + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.shape(id)[0];
                let c = self.shape(id)[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if rg(p) {
                        Self::accumulate(adj, p, r * w, |dp| {
                            for i in 0..r {
                                for j in 0..w {
                                    dp[i * w + j] += g[i * c + off + j];
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::ScaleRows { x, w } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if rg(*x) {
                    let wv = val(*w);
                    Self::accumulate(adj, *x, r * c, |dx| {
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] += g[i * c + j] * wv[i];
                            }
                        }
                    });
                }
                if rg(*w) {
                    let xv = val(*x);
                    Self::accumulate(adj, *w, r, |dw| {
                        for i in 0..r {
                            for j in 0..c {
                                dw[i] += g[i * c + j] * xv[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::Gather { x, idx } => {
                if rg(*x) {
                    Self::accumulate(adj, *x, numel(*x), |dx| {
                        for (k, &i) in idx.iter().enumerate() {
                            dx[i] += g[k];
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    Self::accumulate(adj, *x, numel(*x), |dx| {
                        for dv in dx.iter_mut() {
                            *dv += g[0];
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if rg(*x) {
                    Self::accumulate(adj, *x, numel(*x), |dx| {
                        for (dv, gv) in dx.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    });
                }
            }
            Op::CtcLoss { logp, target } => {
                if rg(*logp) {
                    let lp = val(*logp);
                    let (t_len, v) = (self.shape(*logp)[0], self.shape(*logp)[1]);
                    let grad = ctc_logp_grad(lp, t_len, v, target);
                    Self::accumulate(adj, *logp, t_len * v, |dx| {
                        for i in 0..dx.len() {
                            dx[i] += g[0] * grad[i];
                        }
                    });
                }
            }
        }
    }
}

/// `log(exp(a) + exp(b))` robust to `-inf` operands.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Extended label at position `s` of the blank-interleaved target.
fn ext_label(target: &[usize], s: usize) -> usize {
    if s % 2 == 0 {
        crate::ctc::BLANK
    } else {
        target[s / 2]
    }
}

/// Forward (alpha) lattice in log space; `[t_len x (2U+1)]` row-major.
fn ctc_alpha(logp: &[f64], t_len: usize, v: usize, target: &[usize]) -> Vec<f64> {
    let s_len = 2 * target.len() + 1;
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = logp[ext_label(target, 0)];
    if s_len > 1 {
        alpha[1] = logp[ext_label(target, 1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let lbl = ext_label(target, s);
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && lbl != crate::ctc::BLANK && lbl != ext_label(target, s - 2) {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + logp[t * v + lbl];
        }
    }
    alpha
}

/// Backward (beta) lattice in log space, symmetric to [`ctc_alpha`]; each
/// entry includes the emission at its own frame.
fn ctc_beta(logp: &[f64], t_len: usize, v: usize, target: &[usize]) -> Vec<f64> {
    let s_len = 2 * target.len() + 1;
    let mut beta = vec![f64::NEG_INFINITY; t_len * s_len];
    let last = t_len - 1;
    beta[last * s_len + s_len - 1] = logp[last * v + ext_label(target, s_len - 1)];
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = logp[last * v + ext_label(target, s_len - 2)];
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let lbl = ext_label(target, s);
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len {
                let nxt = ext_label(target, s + 2);
                if nxt != crate::ctc::BLANK && nxt != lbl {
                    acc = log_add(acc, beta[(t + 1) * s_len + s + 2]);
                }
            }
            beta[t * s_len + s] = acc + logp[t * v + lbl];
        }
    }
    beta
}

/// d(-log Z)/d(logp): minus the per-frame label posterior.
fn ctc_logp_grad(logp: &[f64], t_len: usize, v: usize, target: &[usize]) -> Vec<f64> {
    let s_len = 2 * target.len() + 1;
    let alpha = ctc_alpha(logp, t_len, v, target);
    let beta = ctc_beta(logp, t_len, v, target);
    let log_z = if s_len >= 2 {
        log_add(
            alpha[(t_len - 1) * s_len + s_len - 1],
            alpha[(t_len - 1) * s_len + s_len - 2],
        )
    } else {
        alpha[(t_len - 1) * s_len]
    };
    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        // Accumulate posterior mass per label at frame t.
        let mut by_label = vec![f64::NEG_INFINITY; v];
        for s in 0..s_len {
            let lbl = ext_label(target, s);
            let through = alpha[t * s_len + s] + beta[t * s_len + s] - logp[t * v + lbl];
            by_label[lbl] = log_add(by_label[lbl], through);
        }
        for k in 0..v {
            if by_label[k] != f64::NEG_INFINITY {
                grad[t * v + k] = -(by_label[k] - log_z).exp();
            }
        }
    }
    grad
}
