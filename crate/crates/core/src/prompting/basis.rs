use crate::error::{Error, Result};
use crate::numcore::{Real, Rng, Tensor};

/// Orthonormal basis prompts `F` (rows) with per-row selection tallies.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBasis<S> {
    pub f: Tensor<S>,
    pub counts: Vec<u64>,
}

impl<S: Real> PromptBasis<S> {
    /// Gaussian rows made orthonormal by Gram-Schmidt.
    pub fn init(size: usize, d_f: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            f: orthonormal_rows(size, d_f, rng)?,
            counts: vec![0; size],
        })
    }

    pub fn from_rows(f: Tensor<S>) -> Self {
        let counts = vec![0; f.rows()];
        Self { f, counts }
    }

    pub fn size(&self) -> usize {
        self.f.rows()
    }

    pub fn d_f(&self) -> usize {
        self.f.cols()
    }

    /// Top-k selection; tallies the chosen rows when `training`.
    pub fn select_topk(&mut self, hz: &[S], k: usize, training: bool) -> SubspaceSelection<S> {
        let sel = select_topk(hz, &self.f, k);
        if training {
            record(&mut self.counts, &sel.indices);
        }
        sel
    }

    pub fn select_sampled(
        &mut self,
        hz: &[S],
        k: usize,
        sampler: &mut SamplerState,
    ) -> SubspaceSelection<S> {
        let sel = select_sampled(hz, &self.f, k, &self.counts, sampler);
        record(&mut self.counts, &sel.indices);
        sel
    }

    pub fn reset_counts(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }
}

pub fn orthonormal_rows<S: Real>(size: usize, d_f: usize, rng: &mut Rng) -> Result<Tensor<S>> {
    if size > d_f {
        return Err(Error::Config(format!(
            "cannot fit {size} orthonormal rows in {d_f} dimensions"
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(size);
    while rows.len() < size {
        let mut v: Vec<f64> = (0..d_f).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= n);
        rows.push(v);
    }
    let data = rows.into_iter().flatten().map(S::of).collect();
    Ok(Tensor::matrix(size, d_f, data))
}

/// Rescales every row of `f` to unit L2 norm.
pub fn renormalize_rows<S: Real>(f: &mut Tensor<S>) {
    for r in 0..f.rows() {
        let row = f.row_mut(r);
        let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        if n > S::zero() {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// `max_{i != j} |f_i . f_j|`.
pub fn gram_offdiag_max<S: Real>(f: &Tensor<S>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..f.rows() {
        for j in i + 1..f.rows() {
            let d: S = f.row(i).iter().zip(f.row(j)).map(|(&a, &b)| a * b).sum();
            worst = worst.max(d.as_f64().abs());
        }
    }
    worst
}

/// Chosen basis rows for one query, in selection order.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceSelection<S> {
    pub indices: Vec<usize>,
    /// `alpha_i = hz . f_{indices[i]}`.
    pub alpha: Vec<S>,
    pub query_norm: S,
}

impl<S: Real> SubspaceSelection<S> {
    /// Selection of the given rows with coefficients computed against `f`.
    pub fn of(hz: &[S], f: &Tensor<S>, indices: Vec<usize>) -> Self {
        let alpha = indices.iter().map(|&i| dot(hz, f.row(i))).collect();
        Self {
            indices,
            alpha,
            query_norm: dot(hz, hz).sqrt(),
        }
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// `[B x k]` matrix whose column `c` is the one-hot code of `indices[c]`.
    pub fn one_hot(&self, basis_size: usize) -> Tensor<S> {
        let mut a = Tensor::zeros(&[basis_size, self.k()]);
        for (c, &i) in self.indices.iter().enumerate() {
            a.set(i, c, S::one());
        }
        a
    }
}

fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn dots<S: Real>(hz: &[S], f: &Tensor<S>) -> Vec<S> {
    (0..f.rows()).map(|i| dot(hz, f.row(i))).collect()
}

/// Indices of the `k` dot products with `hz` of largest magnitude, ties to the
/// lower index. These rows span the best `k`-dimensional reconstruction of `hz`
/// when `f` is orthonormal.
pub fn select_topk<S: Real>(hz: &[S], f: &Tensor<S>, k: usize) -> SubspaceSelection<S> {
    let d: Vec<S> = dots(hz, f).into_iter().map(|v| v.abs()).collect();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| {
        d[b].partial_cmp(&d[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    SubspaceSelection::of(hz, f, order)
}

pub fn record(counts: &mut [u64], indices: &[usize]) {
    for &i in indices {
        counts[i] += 1;
    }
}

/// Mixture weight and randomness for sampled selection.
#[derive(Clone, Debug)]
pub struct SamplerState {
    pub gamma: f64,
    pub temperature: f64,
    pub rng: Rng,
}

impl SamplerState {
    pub fn new(gamma: f64, temperature: f64, rng: Rng) -> Self {
        Self {
            gamma,
            temperature,
            rng,
        }
    }
}

/// `pi_m = gamma * softmax(|dots| / temperature) + (1 - gamma) * pi_invf` with
/// `pi_invf` proportional to `1 / (count + 1)`.
pub fn mixture_distribution(
    dots: &[f64],
    counts: &[u64],
    gamma: f64,
    temperature: f64,
) -> Vec<f64> {
    let max = dots
        .iter()
        .map(|d| d.abs())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = dots
        .iter()
        .map(|d| ((d.abs() - max) / temperature).exp())
        .collect();
    let es: f64 = e.iter().sum();
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / (c as f64 + 1.0)).collect();
    let is: f64 = inv.iter().sum();
    e.iter()
        .zip(&inv)
        .map(|(a, b)| gamma * a / es + (1.0 - gamma) * b / is)
        .collect()
}

/// Draws `k` distinct rows from the mixture distribution, renormalizing over
/// the rows not yet drawn after every draw.
pub fn select_sampled<S: Real>(
    hz: &[S],
    f: &Tensor<S>,
    k: usize,
    counts: &[u64],
    sampler: &mut SamplerState,
) -> SubspaceSelection<S> {
    let d: Vec<f64> = dots(hz, f).into_iter().map(|v| v.as_f64().abs()).collect();
    let mut w = mixture_distribution(&d, counts, sampler.gamma, sampler.temperature);
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k.min(w.len()) {
        let mass: f64 = w.iter().sum();
        let i = if mass > 0.0 {
            sampler.rng.categorical(&w)
        } else {
            // all remaining mass underflowed; fall back to the best remaining row
            (0..d.len())
                .filter(|i| !picked.contains(i))
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if d[b] >= d[i] => Some(b),
                    _ => Some(i),
                })
                .expect("k does not exceed the basis size")
        };
        picked.push(i);
        w[i] = 0.0;
    }
    SubspaceSelection::of(hz, f, picked)
}
