//! Multi-head scaled dot-product cross-attention, composed from tape ops.

use super::{NodeId, Tape};
use crate::error::{Error, Result};

/// Tape handles for one attention layer's projection parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub w_q: NodeId,
    pub b_q: NodeId,
    pub w_k: NodeId,
    pub b_k: NodeId,
    pub w_v: NodeId,
    pub b_v: NodeId,
    pub w_o: NodeId,
    pub b_o: NodeId,
}

/// Scaled dot-product attention of `q_in` rows over `kv_in` rows.
///
/// Queries are projected per head, attend over the projected keys with
/// softmax weights (rows sum to 1), the per-head results are concatenated
/// and passed through the output projection. Output has the shape of
/// `q_in`; no operation mixes distinct query rows.
pub fn multi_head_cross_attention(
    tape: &mut Tape,
    q_in: NodeId,
    kv_in: NodeId,
    params: &AttentionNodes,
    heads: usize,
) -> Result<NodeId> {
    let (_, d) = tape.value(q_in).dims2()?;
    let (_, d_kv) = tape.value(kv_in).dims2()?;
    if d != d_kv {
        return Err(Error::ShapeMismatch(format!(
            "attention query width {d} vs key/value width {d_kv}"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "embedding dim {d} not divisible by {heads} heads"
        )));
    }
    let d_head = d / heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let q = tape.matmul(q_in, params.w_q)?;
    let q = tape.add_row(q, params.b_q)?;
    let k = tape.matmul(kv_in, params.w_k)?;
    let k = tape.add_row(k, params.b_k)?;
    let v = tape.matmul(kv_in, params.w_v)?;
    let v = tape.add_row(v, params.b_v)?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores)?;
        head_outs.push(tape.matmul(weights, vh)?);
    }
    let cat = if head_outs.len() == 1 { head_outs[0] } else { tape.concat_cols(&head_outs)? };
    let out = tape.matmul(cat, params.w_o)?;
    tape.add_row(out, params.b_o)
}
