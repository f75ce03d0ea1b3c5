//! The single masked scaled-dot-product attention primitive shared by the
//! downsampler and both aggregators.

use crate::error::{Result, StabError};
use crate::params::Bound;
use crate::tensor::{Tape, Var};

/// Query/key/value projections for one attention instance.
#[derive(Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

impl AttentionParams {
    /// Fetch the three projections bound under `<prefix>.wq/.wk/.wv`.
    pub fn bound(bound: &Bound, prefix: &str) -> AttentionParams {
        AttentionParams {
            wq: bound.var(&format!("{prefix}.wq")),
            wk: bound.var(&format!("{prefix}.wk")),
            wv: bound.var(&format!("{prefix}.wv")),
        }
    }
}

/// Masked single-head attention: softmax(Pq(q)·Pk(K)ᵀ/√d_attn)·Pv(V).
///
/// Masked keys receive weight exactly 0.0, so the output is bitwise
/// invariant to any finite content in masked key/value rows. At least one
/// key must be unmasked.
pub fn attend(
    tape: &Tape,
    query: Var,
    keys: Var,
    values: Var,
    params: AttentionParams,
    mask: &[bool],
) -> Result<Var> {
    let qs = tape.shape(query);
    let ks = tape.shape(keys);
    let vs = tape.shape(values);
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(StabError::shape("attend expects rank-2 q/k/v".to_string()));
    }
    if ks != vs {
        return Err(StabError::shape(format!(
            "attend: keys {ks:?} and values {vs:?} differ"
        )));
    }
    if qs[1] != ks[1] {
        return Err(StabError::shape(format!(
            "attend: query dim {} vs key dim {}",
            qs[1], ks[1]
        )));
    }
    if mask.len() != ks[0] {
        return Err(StabError::shape(format!(
            "attend: mask length {} vs {} keys",
            mask.len(),
            ks[0]
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(StabError::AllMasked);
    }
    let d_attn = tape.shape(params.wq)[1];
    let q = tape.matmul(query, params.wq);
    let k = tape.matmul(keys, params.wk);
    let v = tape.matmul(values, params.wv);
    let scores = tape.matmul(q, tape.transpose2(k));
    let scaled = tape.scale(scores, 1.0 / (d_attn as f64).sqrt());
    let weights = tape.masked_softmax_rows(scaled, mask);
    Ok(tape.matmul(weights, v))
}
