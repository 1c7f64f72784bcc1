use super::{Fault, Graph, Real, Tensor, Var};
use crate::error::Result;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Finite-difference rule used for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    Central(f64),
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
    FivePoint(f64),
}

impl Stencil {
    /// Numeric derivative of `eval` along one coordinate currently at `x`.
    pub fn derivative(
        self,
        x: f64,
        mut eval: impl FnMut(f64) -> Result<f64>,
    ) -> Result<f64> {
        Ok(match self {
            Stencil::Central(h) => (eval(x + h)? - eval(x - h)?) / (2.0 * h),
            Stencil::FivePoint(h) => {
                let (p2, p1) = (eval(x + 2.0 * h)?, eval(x + h)?);
                let (m1, m2) = (eval(x - h)?, eval(x - 2.0 * h)?);
                (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
            }
        })
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the worst relative error over every leaf component.
///
/// `f` rebuilds the computation on a fresh graph from the bound leaves; it must
/// be deterministic. `fault` corrupts a backward rule in the analytic pass only.
pub fn finite_diff_check<S, F>(
    leaves: &[Tensor<S>],
    step: S,
    fault: Option<Fault>,
    f: F,
) -> Result<f64>
where
    S: Real,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(leaves, Stencil::Central(step.as_f64()), fault, f)
}

/// [`finite_diff_check`] with an explicit stencil.
pub fn finite_diff_check_with<S, F>(
    leaves: &[Tensor<S>],
    stencil: Stencil,
    fault: Option<Fault>,
    f: F,
) -> Result<f64>
where
    S: Real,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut g = match fault {
        Some(fault) => Graph::with_fault(fault),
        None => Graph::new(),
    };
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<S>> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |perturbed: &[Tensor<S>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item().as_f64())
    };

    let mut work: Vec<Tensor<S>> = leaves.to_vec();
    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        for ci in 0..leaf.len() {
            let orig = leaf.data()[ci];
            let numeric = stencil.derivative(orig.as_f64(), |x| {
                work[li].data_mut()[ci] = S::of(x);
                eval(&work)
            })?;
            work[li].data_mut()[ci] = orig;
            let err = relative_error(analytic[li].data()[ci].as_f64(), numeric);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
