use crate::encoders::Linear;
use crate::error::Result;
use crate::numcore::{ParamGroup, ParamId, ParamStore, Real, Rng, Session, Tensor, Var};

/// One direction of a single-layer LSTM with hidden width equal to its input.
#[derive(Clone, Copy, Debug)]
pub struct LstmDirection {
    /// `[d x 4d]`, gate order input, forget, cell, output.
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

/// Context modeling module: a bidirectional LSTM over frame contexts followed by
/// a per-frame linear head producing that frame's prompts.
#[derive(Clone, Debug)]
pub struct Cmm {
    pub d: usize,
    pub frames: usize,
    pub prompts: usize,
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
    /// `heads[f]` maps `[1 x 2d]` to `[1 x prompts * d]`.
    pub heads: Vec<Linear>,
}

impl Cmm {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        d: usize,
        frames: usize,
        prompts: usize,
    ) -> Self {
        let mut dir = |name: &str| {
            let std = 1.0 / (d as f64).sqrt();
            let mut w = |suffix: &str| {
                let data = (0..d * 4 * d).map(|_| S::of(std * rng.normal())).collect();
                store.add(
                    &format!("cmm.{name}.{suffix}"),
                    Tensor::matrix(d, 4 * d, data),
                    ParamGroup::Cmm,
                    false,
                )
            };
            let w_ih = w("w_ih");
            let w_hh = w("w_hh");
            let b = store.add(
                &format!("cmm.{name}.b"),
                Tensor::zeros(&[1, 4 * d]),
                ParamGroup::Cmm,
                false,
            );
            LstmDirection { w_ih, w_hh, b }
        };
        let fwd = dir("fwd");
        let bwd = dir("bwd");
        let heads = (0..frames)
            .map(|f| {
                let lin = Linear::new(store, rng, &format!("cmm.head{f}"), 2 * d, prompts * d, 0.5);
                for id in [lin.w, lin.b] {
                    let e = store.entry_mut(id);
                    e.group = ParamGroup::Cmm;
                    e.backbone = false;
                }
                lin
            })
            .collect();
        Self {
            d,
            frames,
            prompts,
            fwd,
            bwd,
            heads,
        }
    }

    /// Forward and backward hidden states per frame, each `[n x d]`, for frame
    /// contexts `ctx [n * T x d]` (video-major).
    pub fn hidden_states<S: Real>(
        &self,
        s: &mut Session<S>,
        ctx: Var,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let n = s.g.value(ctx).rows() / self.frames;
        let steps: Vec<Var> = (0..self.frames)
            .map(|t| {
                let rows: Vec<usize> = (0..n).map(|i| i * self.frames + t).collect();
                s.g.gather_rows(ctx, &rows)
            })
            .collect::<Result<_>>()?;
        let fwd = self.run(s, &self.fwd, steps.iter().copied(), n)?;
        let mut bwd = self.run(s, &self.bwd, steps.iter().rev().copied(), n)?;
        bwd.reverse();
        Ok((fwd, bwd))
    }

    fn run<S: Real>(
        &self,
        s: &mut Session<S>,
        dir: &LstmDirection,
        steps: impl Iterator<Item = Var>,
        n: usize,
    ) -> Result<Vec<Var>> {
        let d = self.d;
        let (w_ih, w_hh, b) = (s.p(dir.w_ih), s.p(dir.w_hh), s.p(dir.b));
        let mut h = s.g.constant(Tensor::zeros(&[n, d]));
        let mut c = s.g.constant(Tensor::zeros(&[n, d]));
        let mut out = Vec::new();
        for x in steps {
            let a = s.g.matmul(x, w_ih)?;
            let r = s.g.matmul(h, w_hh)?;
            let z = s.g.add(a, r)?;
            let z = s.g.add_row(z, b)?;
            let i = s.g.slice_cols(z, 0, d)?;
            let f = s.g.slice_cols(z, d, 2 * d)?;
            let gc = s.g.slice_cols(z, 2 * d, 3 * d)?;
            let o = s.g.slice_cols(z, 3 * d, 4 * d)?;
            let i = s.g.sigmoid(i);
            let f = s.g.sigmoid(f);
            let gc = s.g.tanh(gc);
            let o = s.g.sigmoid(o);
            let keep = s.g.mul(f, c)?;
            let write = s.g.mul(i, gc)?;
            c = s.g.add(keep, write)?;
            let tc = s.g.tanh(c);
            h = s.g.mul(o, tc)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Prompts for every video, `[n * T * prompts x d]`, video-major then
    /// frame-major.
    pub fn generate<S: Real>(&self, s: &mut Session<S>, ctx: Var) -> Result<Var> {
        let n = s.g.value(ctx).rows() / self.frames;
        let (fwd, bwd) = self.hidden_states(s, ctx)?;
        let mut per_frame = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let hcat = s.g.concat_cols(&[fwd[t], bwd[t]])?;
            let y = self.heads[t].apply(s, hcat)?;
            per_frame.push(s.g.reshape(y, n * self.prompts, self.d)?);
        }
        // rows are (frame, video, prompt); reorder to (video, frame, prompt)
        let stacked = s.g.concat_rows(&per_frame)?;
        let m = self.prompts;
        let order: Vec<usize> = (0..n)
            .flat_map(|i| {
                (0..self.frames).flat_map(move |t| (0..m).map(move |p| (t * n + i) * m + p))
            })
            .collect();
        s.g.gather_rows(stacked, &order)
    }
}
