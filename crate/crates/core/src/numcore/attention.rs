use std::sync::Arc;

use super::{AttentionMask, Graph, Real, Var};
use crate::error::Result;

/// Bound projection weights of one attention layer (`x W + b` convention).
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Projects queries from `q_in` and keys/values from `kv_in`, then applies
/// masked multi-head scaled dot-product attention and the output projection.
pub fn masked_attention<S: Real>(
    g: &mut Graph<S>,
    q_in: Var,
    kv_in: Var,
    mask: &Arc<AttentionMask>,
    heads: usize,
    w: &AttentionVars,
) -> Result<Var> {
    let q = g.linear(q_in, w.wq, Some(w.bq))?;
    let k = g.linear(kv_in, w.wk, Some(w.bk))?;
    let v = g.linear(kv_in, w.wv, Some(w.bv))?;
    let a = g.attention(q, k, v, mask, heads)?;
    g.linear(a, w.wo, Some(w.bo))
}
