//! Text/attribute incongruity through a bilinear affinity matrix.
//!
//! `C = tanh(P W Qᵀ)` scores every (text position, attribute position) pair.
//! A column-wise max over the text rows gives one weight per attribute, and
//! the weighted sum of attribute rows is `q_att`. The weights are the raw
//! pooled `tanh` values (no softmax), so they lie in `(-1, 1)` and may be
//! negative.

use alloc::vec::Vec;

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::nn::{self, ModelRng};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct CoAttention {
    pub weight: ParamId,
}

/// Graph handles of every intermediate, for the attention dump.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `N×M` affinity.
    pub affinity: Var,
    /// Length-`M` attention weights.
    pub alpha: Var,
    /// Length-`d` attended attribute vector.
    pub q_att: Var,
}

impl CoAttention {
    /// `W` is `d×d`, drawn from `N(0, (0.5/d)²)` so that initial affinities
    /// of unit-scale rows stay out of `tanh` saturation.
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut ModelRng) -> Self {
        let weight = store.add(
            "coattention.weight",
            nn::normal_tensor(&[d, d], 0.5 / d as f64, rng),
            ParamGroup::CoAttention,
        );
        Self { weight }
    }

    pub fn forward(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        p: Var,
        q: Var,
        text_mask: &[bool],
        attr_mask: &[bool],
    ) -> Result<AttentionOutput> {
        let w = graph.param(store, self.weight);
        coattention_forward(graph, p, q, w, text_mask, attr_mask)
    }
}

/// `C = tanh(P · W · Qᵀ)` for `P: N×d`, `Q: M×d`, `W: d×d`.
pub fn affinity(graph: &mut Graph, p: Var, q: Var, w: Var) -> Result<Var> {
    let (ps, qs, ws) = (graph.shape(p).to_vec(), graph.shape(q).to_vec(), graph.shape(w).to_vec());
    let ok = ps.len() == 2 && qs.len() == 2 && ws.len() == 2 && ps[1] == ws[0] && ws[1] == qs[1] && ws[0] == ws[1];
    if !ok {
        return Err(Error::dim("affinity", &ps, &qs));
    }
    let pw = graph.matmul(p, w)?;
    let qt = graph.transpose(q)?;
    let scores = graph.matmul(pw, qt)?;
    graph.tanh(scores)
}

/// Max over unmasked text rows for each attribute column; masked attribute
/// columns are forced to zero.
pub fn attention_pool(graph: &mut Graph, c: Var, text_mask: &[bool], attr_mask: &[bool]) -> Result<Var> {
    let m = graph.shape(c).get(1).copied().unwrap_or(0);
    if attr_mask.len() != m {
        return Err(Error::dim("attention_pool", graph.shape(c), &[text_mask.len(), attr_mask.len()]));
    }
    let pooled = graph.maxpool_cols(c, text_mask)?;
    if attr_mask.iter().all(|&keep| keep) {
        return Ok(pooled);
    }
    let keep: Vec<f64> = attr_mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    graph.mul_const(pooled, keep)
}

/// `q_att = Σ_j alpha[j] · Q[j, :]`.
pub fn attend(graph: &mut Graph, alpha: Var, q: Var) -> Result<Var> {
    let m = graph.value(alpha).numel();
    let qs = graph.shape(q).to_vec();
    if graph.shape(alpha).len() != 1 || qs.len() != 2 || qs[0] != m {
        return Err(Error::dim("attend", graph.shape(alpha), &qs));
    }
    let row = graph.reshape(alpha, &[1, m])?;
    let out = graph.matmul(row, q)?;
    graph.reshape(out, &[qs[1]])
}

pub fn coattention_forward(
    graph: &mut Graph,
    p: Var,
    q: Var,
    w: Var,
    text_mask: &[bool],
    attr_mask: &[bool],
) -> Result<AttentionOutput> {
    let affinity = affinity(graph, p, q, w)?;
    let alpha = attention_pool(graph, affinity, text_mask, attr_mask)?;
    let q_att = attend(graph, alpha, q)?;
    Ok(AttentionOutput { affinity, alpha, q_att })
}
