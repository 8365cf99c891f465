//! Multi-head scaled dot-product attention built from tape primitives.

use crate::error::{Error, Result};
use crate::numerics::params::{ParamInit, ParamStore};
use crate::numerics::tape::{NodeId, Tape};

/// Handle to one attention block's projections in a [`ParamStore`]:
/// `{prefix}.wq/bq/wk/bk/wv/bv/wo/bo`, each projection `[d x d]` holding the
/// per-head blocks side by side.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub prefix: String,
    pub d: usize,
    pub h: usize,
}

impl AttentionParams {
    pub fn new(prefix: impl Into<String>, d: usize, h: usize) -> Result<Self> {
        if d == 0 || h == 0 || d % h != 0 {
            return Err(Error::Config(format!(
                "attention dim {d} not divisible by {h} heads"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            d,
            h,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.h
    }

    /// Softmax logits are scaled by `1/sqrt(d/h)`.
    pub fn scaling(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn init(&self, store: &mut ParamStore, init: &ParamInit) {
        for w in ["wq", "wk", "wv", "wo"] {
            init.matrix(store, &format!("{}.{w}", self.prefix), self.d, self.d);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            init.zeros(store, &format!("{}.{b}", self.prefix), vec![self.d]);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
            .iter()
            .map(|n| format!("{}.{n}", self.prefix))
            .collect()
    }
}

/// Boolean attention mask; `true` marks an allowed (query, key) pair.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl AttnMask {
    /// Causal mask: query `i` may attend to keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allow[i * n + j] = true;
            }
        }
        Self {
            rows: n,
            cols: n,
            allow,
        }
    }
}

/// Standard multi-head attention: project, split heads, scaled dot-product
/// with optional masking, concatenate, output-project. Masked positions get
/// exactly zero attention weight; each weight row sums to one.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    params: &AttentionParams,
    mask: Option<&AttnMask>,
) -> Result<NodeId> {
    let d = params.d;
    for (node, what) in [(q_in, "query"), (k_in, "key"), (v_in, "value")] {
        let s = tape.shape(node);
        if s.len() != 2 || s[1] != d {
            return Err(Error::InvalidShape {
                op: "multi_head_attention",
                shape: s.to_vec(),
                detail: format!("{what} input must be [T x {d}]"),
            });
        }
    }
    let tq = tape.shape(q_in)[0];
    let tk = tape.shape(k_in)[0];
    if tape.shape(k_in) != tape.shape(v_in) {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            lhs: tape.shape(k_in).to_vec(),
            rhs: tape.shape(v_in).to_vec(),
        });
    }
    if let Some(m) = mask {
        if m.rows != tq || m.cols != tk {
            return Err(Error::InvalidShape {
                op: "multi_head_attention",
                shape: vec![m.rows, m.cols],
                detail: format!("mask must be [{tq} x {tk}]"),
            });
        }
    }

    let p = |t: &mut Tape, n: &str| t.param(store, &format!("{}.{n}", params.prefix));
    let (wq, bq) = (p(tape, "wq")?, p(tape, "bq")?);
    let (wk, bk) = (p(tape, "wk")?, p(tape, "bk")?);
    let (wv, bv) = (p(tape, "wv")?, p(tape, "bv")?);
    let (wo, bo) = (p(tape, "wo")?, p(tape, "bo")?);

    let q = tape.linear(q_in, wq, Some(bq))?;
    let k = tape.linear(k_in, wk, Some(bk))?;
    let v = tape.linear(v_in, wv, Some(bv))?;

    let dk = params.head_dim();
    let mut heads = Vec::with_capacity(params.h);
    for head in 0..params.h {
        let qh = tape.slice_cols(q, head * dk, dk)?;
        let kh = tape.slice_cols(k, head * dk, dk)?;
        let vh = tape.slice_cols(v, head * dk, dk)?;
        let kht = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kht)?;
        let scaled = tape.scale(scores, params.scaling());
        let weights = tape.row_softmax(scaled, mask.map(|m| m.allow.as_slice()))?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let concat = tape.concat_cols(&heads)?;
    tape.linear(concat, wo, Some(bo))
}

/// Sinusoidal absolute positional encoding, `[len x d]`.
pub fn sinusoidal_pe(len: usize, d: usize) -> crate::numerics::tensor::Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = (pos as f64 * rate).sin();
            data[pos * d + 2 * i + 1] = (pos as f64 * rate).cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + d - 1] = (pos as f64 * rate).sin();
        }
    }
    crate::numerics::tensor::Tensor::new(vec![len, d], data).unwrap()
}
