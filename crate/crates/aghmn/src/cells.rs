//! Recurrent building blocks: the standard GRU step, bidirectional sequence
//! encoding, and the attention-gated GRU used for memory summarizing.
//!
//! The AGRU keeps the reset-gated candidate of a normal GRU but has no update
//! gate: the externally supplied attention weight takes its place, mixing the
//! candidate with the previous hidden state.

use crate::autodiff::{Bound, Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Node bindings for one GRU cell.
///
/// `w*` are input-to-hidden matrices (hidden x input), `u*` hidden-to-hidden
/// (hidden x hidden), `b*` biases (hidden).
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub wz: NodeId,
    pub uz: NodeId,
    pub bz: NodeId,
    pub wr: NodeId,
    pub ur: NodeId,
    pub br: NodeId,
    pub wh: NodeId,
    pub uh: NodeId,
    pub bh: NodeId,
}

/// Node bindings for one AGRU cell: a GRU without update-gate parameters.
#[derive(Clone, Copy, Debug)]
pub struct AgruParams {
    pub wr: NodeId,
    pub ur: NodeId,
    pub br: NodeId,
    pub wh: NodeId,
    pub uh: NodeId,
    pub bh: NodeId,
}

const GRU_FIELDS: [&str; 9] = ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"];
const AGRU_FIELDS: [&str; 6] = ["wr", "ur", "br", "wh", "uh", "bh"];

/// Registers GRU parameter tensors under `{prefix}.{field}`, drawn uniformly
/// from [-1/sqrt(hidden), 1/sqrt(hidden)).
pub fn register_gru(set: &mut ParamSet, prefix: &str, input_dim: usize, hidden: usize) -> Result<()> {
    let bound = 1.0 / (hidden as f64).sqrt();
    for field in GRU_FIELDS {
        let shape: Vec<usize> = match field.as_bytes()[0] {
            b'w' => vec![hidden, input_dim],
            b'u' => vec![hidden, hidden],
            _ => vec![hidden],
        };
        set.register_uniform(&format!("{prefix}.{field}"), &shape, bound)?;
    }
    Ok(())
}

pub fn register_agru(set: &mut ParamSet, prefix: &str, input_dim: usize, hidden: usize) -> Result<()> {
    let bound = 1.0 / (hidden as f64).sqrt();
    for field in AGRU_FIELDS {
        let shape: Vec<usize> = match field.as_bytes()[0] {
            b'w' => vec![hidden, input_dim],
            b'u' => vec![hidden, hidden],
            _ => vec![hidden],
        };
        set.register_uniform(&format!("{prefix}.{field}"), &shape, bound)?;
    }
    Ok(())
}

pub fn bind_gru(bound: &Bound, prefix: &str) -> Result<GruParams> {
    Ok(GruParams {
        wz: bound.node(&format!("{prefix}.wz"))?,
        uz: bound.node(&format!("{prefix}.uz"))?,
        bz: bound.node(&format!("{prefix}.bz"))?,
        wr: bound.node(&format!("{prefix}.wr"))?,
        ur: bound.node(&format!("{prefix}.ur"))?,
        br: bound.node(&format!("{prefix}.br"))?,
        wh: bound.node(&format!("{prefix}.wh"))?,
        uh: bound.node(&format!("{prefix}.uh"))?,
        bh: bound.node(&format!("{prefix}.bh"))?,
    })
}

pub fn bind_agru(bound: &Bound, prefix: &str) -> Result<AgruParams> {
    Ok(AgruParams {
        wr: bound.node(&format!("{prefix}.wr"))?,
        ur: bound.node(&format!("{prefix}.ur"))?,
        br: bound.node(&format!("{prefix}.br"))?,
        wh: bound.node(&format!("{prefix}.wh"))?,
        uh: bound.node(&format!("{prefix}.uh"))?,
        bh: bound.node(&format!("{prefix}.bh"))?,
    })
}

fn gate(g: &mut Graph, w: NodeId, x: NodeId, u: NodeId, h: NodeId, b: NodeId) -> Result<NodeId> {
    let wx = g.matmul(w, x)?;
    let uh = g.matmul(u, h)?;
    let lin = g.add(wx, uh)?;
    g.add(lin, b)
}

/// One GRU step:
/// z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br),
/// h~ = tanh(Wh x + Uh (r∘h) + bh), h' = (1-z)∘h + z∘h~.
pub fn gru_step(g: &mut Graph, x: NodeId, h_prev: NodeId, p: &GruParams) -> Result<NodeId> {
    let z_pre = gate(g, p.wz, x, p.uz, h_prev, p.bz)?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = gate(g, p.wr, x, p.ur, h_prev, p.br)?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.mul(r, h_prev)?;
    let cand_pre = gate(g, p.wh, x, p.uh, rh, p.bh)?;
    let cand = g.tanh(cand_pre)?;
    let ones = g.leaf(Tensor::filled(g.value(h_prev).shape(), 1.0));
    let keep = g.sub(ones, z)?;
    let kept = g.mul(keep, h_prev)?;
    let new = g.mul(z, cand)?;
    g.add(kept, new)
}

/// Runs a forward and a backward GRU over a sequence from zero initial
/// states. Both returned lists align with the input positions.
pub fn bigru_encode(
    g: &mut Graph,
    seq: &[NodeId],
    fwd: &GruParams,
    bwd: &GruParams,
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    if seq.is_empty() {
        return Err(Error::contract("bigru_encode on an empty sequence"));
    }
    let hidden = g.value(fwd.bz).numel();
    let mut h = g.leaf(Tensor::zeros(&[hidden]));
    let mut fwd_states = Vec::with_capacity(seq.len());
    for &x in seq {
        h = gru_step(g, x, h, fwd)?;
        fwd_states.push(h);
    }
    let mut h = g.leaf(Tensor::zeros(&[hidden]));
    let mut bwd_states = vec![h; seq.len()];
    for (n, &x) in seq.iter().enumerate().rev() {
        h = gru_step(g, x, h, bwd)?;
        bwd_states[n] = h;
    }
    Ok((fwd_states, bwd_states))
}

/// One AGRU step. The attention scalar `a` replaces the update gate:
/// h' = a∘h~ + (1-a)∘h.
pub fn agru_step(g: &mut Graph, m: NodeId, a: NodeId, h_prev: NodeId, p: &AgruParams) -> Result<NodeId> {
    let ta = g.value(a);
    if !ta.is_scalar() {
        return Err(Error::contract(format!(
            "attention weight must be scalar-shaped, got {:?}",
            ta.shape()
        )));
    }
    let av = ta.item();
    if !(0.0..=1.0).contains(&av) {
        return Err(Error::contract(format!("attention weight {av} outside [0,1]")));
    }
    let r_pre = gate(g, p.wr, m, p.ur, h_prev, p.br)?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.mul(r, h_prev)?;
    let cand_pre = gate(g, p.wh, m, p.uh, rh, p.bh)?;
    let cand = g.tanh(cand_pre)?;
    let one = g.scalar(1.0);
    let rest = g.sub(one, a)?;
    let new = g.scalar_mul(a, cand)?;
    let kept = g.scalar_mul(rest, h_prev)?;
    g.add(new, kept)
}

/// Folds [`agru_step`] over the memories and returns the final hidden state.
pub fn agru_summarize(
    g: &mut Graph,
    memories: &[NodeId],
    weights: &[NodeId],
    p: &AgruParams,
) -> Result<NodeId> {
    if memories.is_empty() {
        return Err(Error::contract("agru_summarize on an empty memory bank"));
    }
    if memories.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} memories but {} weights",
            memories.len(),
            weights.len()
        )));
    }
    let dim = g.value(memories[0]).numel();
    let mut h = g.leaf(Tensor::zeros(&[dim]));
    for (&m, &a) in memories.iter().zip(weights) {
        h = agru_step(g, m, a, h, p)?;
    }
    Ok(h)
}

/// Forward and backward AGRU summaries over the same bank. The backward pass
/// reads memories and weights in reverse, favoring distant memories.
pub fn biagru_summarize(
    g: &mut Graph,
    memories: &[NodeId],
    weights: &[NodeId],
    pf: &AgruParams,
    pb: &AgruParams,
) -> Result<(NodeId, NodeId)> {
    let c_f = agru_summarize(g, memories, weights, pf)?;
    let rev_m: Vec<NodeId> = memories.iter().rev().copied().collect();
    let rev_w: Vec<NodeId> = weights.iter().rev().copied().collect();
    let c_b = agru_summarize(g, &rev_m, &rev_w, pb)?;
    Ok((c_f, c_b))
}
