//! Dense arrays with a dynamic reverse-mode differentiation graph.
//!
//! Everything in the model is expressed as 2-D arrays (vectors are `1 x d`,
//! scalars `1 x 1`). A [`Graph`] is rebuilt for every forward pass; leaves are
//! bound from a [`ParamStore`] and gradients flow back into it after
//! [`Graph::backward`].

mod attention;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod rng;
mod tensor;

pub use attention::{masked_attention, AttentionVars};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, relative_error, Stencil};
pub use graph::{AttentionMask, Fault, Graph, Var, MASK_NEG};
pub use kernels::{gemm, gemm_nt, gemm_tn};
pub use params::{ParamEntry, ParamGroup, ParamId, ParamStore, Session};
pub use rng::Rng;
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar field the numeric core is generic over (`f32`, `f64`).
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Every `f64` is representable (possibly rounded) in
    /// the supported types.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests;
