use std::sync::Arc;

use crate::error::Result;
use crate::numcore::{
    masked_attention, AttentionMask, AttentionVars, ParamGroup, ParamId, ParamStore, Real, Rng,
    Session, Tensor, Var,
};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Gaussian `[rows x cols]` parameter with the given standard deviation.
pub(crate) fn gaussian<S: Real>(
    store: &mut ParamStore<S>,
    rng: &mut Rng,
    name: &str,
    shape: [usize; 2],
    std: f64,
    group: ParamGroup,
    backbone: bool,
) -> ParamId {
    let data = (0..shape[0] * shape[1])
        .map(|_| S::of(std * rng.normal()))
        .collect();
    store.add(
        name,
        Tensor::matrix(shape[0], shape[1], data),
        group,
        backbone,
    )
}

pub(crate) fn constant<S: Real>(
    store: &mut ParamStore<S>,
    name: &str,
    shape: [usize; 2],
    value: f64,
    group: ParamGroup,
    backbone: bool,
) -> ParamId {
    store.add(name, Tensor::filled(&shape, S::of(value)), group, backbone)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
    ) -> Self {
        let std = gain / (d_in as f64).sqrt();
        Self {
            w: gaussian(
                store,
                rng,
                &format!("{name}.w"),
                [d_in, d_out],
                std,
                ParamGroup::Weight,
                true,
            ),
            b: constant(
                store,
                &format!("{name}.b"),
                [1, d_out],
                0.0,
                ParamGroup::Bias,
                true,
            ),
        }
    }

    pub fn apply<S: Real>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<S: Real>(store: &mut ParamStore<S>, name: &str, d: usize) -> Self {
        Self {
            gain: constant(
                store,
                &format!("{name}.gain"),
                [1, d],
                1.0,
                ParamGroup::Gain,
                true,
            ),
            bias: constant(
                store,
                &format!("{name}.bias"),
                [1, d],
                0.0,
                ParamGroup::Bias,
                true,
            ),
        }
    }

    pub fn apply<S: Real>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gain), s.p(self.bias));
        s.g.layer_norm(x, g, b, S::of(LN_EPS))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub(crate) fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        d: usize,
        out_gain: f64,
    ) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, 1.0),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, 1.0),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, 1.0),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d, out_gain),
        }
    }

    pub fn apply<S: Real>(
        &self,
        s: &mut Session<S>,
        x: Var,
        mask: &Arc<AttentionMask>,
        heads: usize,
    ) -> Result<Var> {
        let w = AttentionVars {
            wq: s.p(self.q.w),
            bq: s.p(self.q.b),
            wk: s.p(self.k.w),
            bk: s.p(self.k.b),
            wv: s.p(self.v.w),
            bv: s.p(self.v.b),
            wo: s.p(self.o.w),
            bo: s.p(self.o.b),
        };
        masked_attention(&mut s.g, x, x, mask, heads, &w)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub(crate) fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        d: usize,
        hidden: usize,
        out_gain: f64,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, hidden, 1.0),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d, out_gain),
        }
    }

    pub fn apply<S: Real>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let h = self.fc1.apply(s, x)?;
        let h = s.g.gelu(h);
        self.fc2.apply(s, h)
    }
}

/// `x + f(norm(x))`.
pub(crate) fn residual<S: Real>(
    s: &mut Session<S>,
    x: Var,
    norm: &LayerNorm,
    f: impl FnOnce(&mut Session<S>, Var) -> Result<Var>,
) -> Result<Var> {
    let h = norm.apply(s, x)?;
    let h = f(s, h)?;
    s.g.add(x, h)
}
