use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Real, Tensor, Var};

/// Residual norms are `sqrt(r.r + RECON_EPS^2)`.
pub const RECON_EPS: f64 = 1e-12;
const PROJECT_EPS: f64 = 1e-12;

/// Form of the penalty on cross-correlations between basis rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthPenalty {
    /// `sum_{i != j} (f_i . f_j)^2`.
    Squared,
    /// `sum_{i != j} f_i . f_j`.
    Signed,
    Off,
}

/// `h(z)` scaled to unit norm, row-wise: `[Q x d_in] -> [Q x d_f]`.
pub fn project<S: Real>(g: &mut Graph<S>, z: Var, h: Var) -> Result<Var> {
    let y = g.matmul(z, h)?;
    Ok(g.l2_normalize_rows(y, S::of(PROJECT_EPS)))
}

/// Decoded prompts `g(f_i)` for the listed basis rows, `[len x d_out]`.
pub fn synthesize<S: Real>(
    g: &mut Graph<S>,
    basis: Var,
    decoder: Var,
    indices: &[usize],
) -> Result<Var> {
    let rows = g.gather_rows(basis, indices)?;
    g.matmul(rows, decoder)
}

/// Per-query reconstruction residuals `|| sum_i alpha_i f_i - hz ||` with
/// `alpha_i = hz . f_i` over each query's selection, `[Q x 1]`.
///
/// Every selection must have the same length.
pub fn recon_losses<S: Real>(
    g: &mut Graph<S>,
    hz: Var,
    basis: Var,
    selections: &[Vec<usize>],
) -> Result<Var> {
    let (q, d) = g.value(hz).dims2();
    if selections.len() != q {
        return Err(Error::shape("recon_losses", &[q], &[selections.len()]));
    }
    let k = selections.first().map_or(0, Vec::len);
    if selections.iter().any(|s| s.len() != k) {
        return Err(Error::Contract("selections differ in size".into()));
    }
    let ones_col = g.constant(Tensor::filled(&[d, 1], S::one()));
    let diff = if k == 0 {
        hz
    } else {
        let flat: Vec<usize> = selections.iter().flatten().copied().collect();
        let rep: Vec<usize> = (0..q).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let rows = g.gather_rows(basis, &flat)?;
        let hrep = g.gather_rows(hz, &rep)?;
        let prod = g.mul(hrep, rows)?;
        let alpha = g.matmul(prod, ones_col)?;
        let ones_row = g.constant(Tensor::filled(&[1, d], S::one()));
        let spread = g.matmul(alpha, ones_row)?;
        let contrib = g.mul(rows, spread)?;
        let mut pool = Tensor::zeros(&[q, q * k]);
        for i in 0..q {
            for c in 0..k {
                pool.set(i, i * k + c, S::one());
            }
        }
        let pool = g.constant(pool);
        let rec = g.matmul(pool, contrib)?;
        g.sub(rec, hz)?
    };
    let sq = g.mul(diff, diff)?;
    let sq = g.matmul(sq, ones_col)?;
    let sq = g.offset(sq, S::of(RECON_EPS * RECON_EPS));
    Ok(g.sqrt(sq))
}

/// Reconstruction residual of a single query `[1 x d_f]`, as a scalar.
pub fn recon_loss<S: Real>(
    g: &mut Graph<S>,
    hz: Var,
    basis: Var,
    indices: &[usize],
) -> Result<Var> {
    let r = recon_losses(g, hz, basis, &[indices.to_vec()])?;
    Ok(g.sum(r))
}

/// Penalty on off-diagonal entries of `F F^T`; `None` when switched off.
pub fn orth_penalty<S: Real>(
    g: &mut Graph<S>,
    basis: Var,
    variant: OrthPenalty,
) -> Result<Option<Var>> {
    if variant == OrthPenalty::Off {
        return Ok(None);
    }
    let b = g.value(basis).rows();
    let t = g.transpose(basis);
    let gram = g.matmul(basis, t)?;
    let mut mask = Tensor::filled(&[b, b], S::one());
    for i in 0..b {
        mask.set(i, i, S::zero());
    }
    let mask = g.constant(mask);
    let off = g.mul(gram, mask)?;
    Ok(Some(match variant {
        OrthPenalty::Squared => {
            let sq = g.mul(off, off)?;
            g.sum(sq)
        }
        _ => g.sum(off),
    }))
}

/// Batch synthesis loss: per item, the frame reconstruction residuals summed
/// over frames (averaged over synthesizing layers), plus the caption residual
/// (averaged likewise), plus the orthogonality penalty; averaged over `n` items.
///
/// `video[l]` is `[n * T x 1]`, `text[l]` is `[n x 1]`.
pub fn syn_loss<S: Real>(
    g: &mut Graph<S>,
    video: &[Var],
    text: &[Var],
    orth: Option<Var>,
    n: usize,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (group, count) in [(video, video.len()), (text, text.len())] {
        for &v in group {
            let s = g.sum(v);
            terms.push(g.scale(s, S::one() / S::of((count * n) as f64)));
        }
    }
    if let Some(o) = orth {
        terms.push(o);
    }
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return Ok(g.constant(Tensor::scalar(S::zero()))),
    };
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}
