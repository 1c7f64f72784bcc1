use std::sync::Arc;

use super::blocks::{gaussian, residual, Attention, LayerNorm, Linear, Mlp};
use super::config::EncoderConfig;
use super::mask::{AttentionMode, PromptSlots, VideoLayout};
use super::text::FEATURE_EPS;
use crate::error::{Error, Result};
use crate::numcore::{ParamGroup, ParamId, ParamStore, Real, Rng, Session, Tensor, Var};

/// Pre-extracted patch features `[n, T, N_p, patch_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBatch<S> {
    pub patches: Tensor<S>,
}

impl<S: Real> VideoBatch<S> {
    pub fn new(patches: Tensor<S>) -> Result<Self> {
        if patches.shape().len() != 4 {
            return Err(Error::shape("video batch", patches.shape(), &[0, 0, 0, 0]));
        }
        if !patches.is_finite() {
            return Err(Error::Numeric("non-finite patch feature".into()));
        }
        Ok(Self { patches })
    }

    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn patches_per_frame(&self) -> usize {
        self.patches.shape()[2]
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.shape()[3]
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let per: usize = self.patches.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.patches.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.patches.shape().to_vec();
        shape[0] = idx.len();
        Self {
            patches: Tensor::new(shape, data).expect("selected shape matches data"),
        }
    }
}

/// Supplies video prompts while a batch is encoded.
pub trait VideoPrompter<S: Real> {
    fn slots(&self) -> PromptSlots;

    /// Spatial attention regime of `layer`.
    fn mode(&self, layer: usize) -> AttentionMode;

    /// Whether [`VideoPrompter::prompts`] reads frame contexts at `layer`.
    fn needs_context(&self, layer: usize) -> bool;

    /// Prompts entering `layer` for every video, stacked video-major as
    /// `[n * slots x d_vid]` (frame-major within a video for per-frame slots).
    /// `None` carries the previous prompt states forward and is not allowed at
    /// layer 0. `ctx` holds the frame contexts `[n * T x d_vid]` when requested.
    fn prompts(
        &mut self,
        s: &mut Session<S>,
        layer: usize,
        ctx: Option<Var>,
        n: usize,
    ) -> Result<Option<Var>>;
}

/// Fixed prompt tensors per layer, shared by every video in the batch.
#[derive(Clone, Debug)]
pub struct PromptPack<S> {
    pub slots: PromptSlots,
    pub modes: Vec<AttentionMode>,
    /// `layers[l]` is `[slots x d_vid]` when layer `l` injects fresh prompts.
    pub layers: Vec<Option<Tensor<S>>>,
}

impl<S: Real> PromptPack<S> {
    pub fn empty(layers: usize) -> Self {
        Self {
            slots: PromptSlots::None,
            modes: vec![AttentionMode::Intra; layers],
            layers: vec![None; layers],
        }
    }
}

impl<S: Real> VideoPrompter<S> for PromptPack<S> {
    fn slots(&self) -> PromptSlots {
        self.slots
    }

    fn mode(&self, layer: usize) -> AttentionMode {
        self.modes[layer]
    }

    fn needs_context(&self, _: usize) -> bool {
        false
    }

    fn prompts(
        &mut self,
        s: &mut Session<S>,
        layer: usize,
        _: Option<Var>,
        n: usize,
    ) -> Result<Option<Var>> {
        match &self.layers[layer] {
            Some(t) => {
                let p = s.g.constant(t.clone());
                Ok(Some(s.g.concat_rows(&vec![p; n])?))
            }
            None => Ok(None),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VideoLayer {
    pub ln_t: LayerNorm,
    pub attn_t: Attention,
    pub ln_s: LayerNorm,
    pub attn_s: Attention,
    pub ln_m: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct VideoOutput {
    /// Unit-norm joint-space features `[n x d_embed]`.
    pub features: Var,
    /// Final CLS states `[n x d_vid]` before the output norm.
    pub cls: Var,
}

/// Divided space-time transformer whose feature is the final CLS state.
#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos_space: ParamId,
    pub pos_time: ParamId,
    pub layers: Vec<VideoLayer>,
    pub ln_f: LayerNorm,
    pub proj: ParamId,
}

impl VideoEncoder {
    pub fn new<S: Real>(store: &mut ParamStore<S>, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_vid;
        let out_gain = 1.0 / (3.0 * cfg.layers as f64).sqrt();
        let patch_embed = Linear::new(store, rng, "video.patch_embed", cfg.patch_dim, d, 1.0);
        let cls = gaussian(
            store,
            rng,
            "video.cls",
            [1, d],
            0.5,
            ParamGroup::Weight,
            true,
        );
        let pos_space = gaussian(
            store,
            rng,
            "video.pos_space",
            [cfg.patches, d],
            0.1,
            ParamGroup::Weight,
            true,
        );
        let pos_time = gaussian(
            store,
            rng,
            "video.pos_time",
            [cfg.frames, d],
            0.1,
            ParamGroup::Weight,
            true,
        );
        let layers = (0..cfg.layers)
            .map(|l| VideoLayer {
                ln_t: LayerNorm::new(store, &format!("video.l{l}.ln_t"), d),
                attn_t: Attention::new(store, rng, &format!("video.l{l}.attn_t"), d, out_gain),
                ln_s: LayerNorm::new(store, &format!("video.l{l}.ln_s"), d),
                attn_s: Attention::new(store, rng, &format!("video.l{l}.attn_s"), d, out_gain),
                ln_m: LayerNorm::new(store, &format!("video.l{l}.ln_m"), d),
                mlp: Mlp::new(
                    store,
                    rng,
                    &format!("video.l{l}.mlp"),
                    d,
                    d * cfg.mlp_ratio,
                    out_gain,
                ),
            })
            .collect();
        let ln_f = LayerNorm::new(store, "video.ln_f", d);
        let proj = gaussian(
            store,
            rng,
            "video.proj",
            [d, cfg.d_embed],
            1.0 / (d as f64).sqrt(),
            ParamGroup::Weight,
            true,
        );
        Self {
            cfg: cfg.clone(),
            patch_embed,
            cls,
            pos_space,
            pos_time,
            layers,
            ln_f,
            proj,
        }
    }

    /// Embedded input tokens (CLS and patches, no prompts) in layout order.
    pub fn embed<S: Real>(
        &self,
        s: &mut Session<S>,
        batch: &VideoBatch<S>,
    ) -> Result<(Var, VideoLayout)> {
        let (n, t, np) = (batch.len(), batch.frames(), batch.patches_per_frame());
        if t != self.cfg.frames || np != self.cfg.patches || batch.patch_dim() != self.cfg.patch_dim
        {
            return Err(Error::shape(
                "encode_video",
                batch.patches.shape(),
                &[n, self.cfg.frames, self.cfg.patches, self.cfg.patch_dim],
            ));
        }
        let layout = VideoLayout::new(n, t, np, PromptSlots::None);
        let raw = s.g.constant(batch.patches.clone());
        let raw = s.g.reshape(raw, n * t * np, self.cfg.patch_dim)?;
        let pe = self.patch_embed.apply(s, raw)?;
        let space_idx: Vec<usize> = (0..n * t * np).map(|r| r % np).collect();
        let time_idx: Vec<usize> = (0..n * t * np).map(|r| (r / np) % t).collect();
        let ps = s.p(self.pos_space);
        let pt = s.p(self.pos_time);
        let ps = s.g.gather_rows(ps, &space_idx)?;
        let pt = s.g.gather_rows(pt, &time_idx)?;
        let pe = s.g.add(pe, ps)?;
        let pe = s.g.add(pe, pt)?;
        let cls = s.p(self.cls);
        let stacked = s.g.concat_rows(&[pe, cls])?;
        let order: Vec<usize> = (0..layout.content_rows())
            .map(|r| {
                let item = r / (1 + t * np);
                match r % (1 + t * np) {
                    0 => n * t * np,
                    k => item * t * np + k - 1,
                }
            })
            .collect();
        Ok((s.g.gather_rows(stacked, &order)?, layout))
    }

    pub fn encode<S: Real>(
        &self,
        s: &mut Session<S>,
        batch: &VideoBatch<S>,
        prompter: &mut dyn VideoPrompter<S>,
    ) -> Result<VideoOutput> {
        let n = batch.len();
        let (mut x, layout) = self.embed(s, batch)?;
        let layout = VideoLayout::new(n, layout.frames, layout.patches, prompter.slots());
        let prompted = layout.prompts_per_item() > 0;
        let content_idx: Vec<usize> = (0..layout.content_rows()).collect();
        let cls_idx: Vec<usize> = (0..n).map(|i| layout.cls_row(i)).collect();

        let mask_t = Arc::new(layout.temporal_mask());
        let mut mask_s = [None, None];
        let keep = if prompted {
            Some(s.g.constant(layout.content_indicator(self.cfg.d_vid)))
        } else {
            None
        };
        let pool = if prompted {
            let content = VideoLayout::new(n, layout.frames, layout.patches, PromptSlots::None);
            Some(content.frame_pool::<S>())
        } else {
            None
        };

        for (l, layer) in self.layers.iter().enumerate() {
            if prompted {
                let kept = if l == 0 {
                    x
                } else {
                    s.g.gather_rows(x, &content_idx)?
                };
                let ctx = if prompter.needs_context(l) {
                    let pool =
                        s.g.constant(pool.clone().expect("pool built when prompted"));
                    Some(s.g.matmul(pool, kept)?)
                } else {
                    None
                };
                match prompter.prompts(s, l, ctx, n)? {
                    Some(p) => x = s.g.concat_rows(&[kept, p])?,
                    None if l == 0 => {
                        return Err(Error::Contract(
                            "video prompter supplied no input prompts".into(),
                        ))
                    }
                    None => {}
                }
            }
            let mode = prompter.mode(l);
            let slot = mode as usize;
            let mask = mask_s[slot]
                .get_or_insert_with(|| Arc::new(layout.spatial_mask(mode)))
                .clone();
            let heads = self.cfg.heads;
            x = residual(s, x, &layer.ln_t, |s, h| {
                let a = layer.attn_t.apply(s, h, &mask_t, heads)?;
                match keep {
                    Some(k) => s.g.mul(a, k),
                    None => Ok(a),
                }
            })?;
            x = residual(s, x, &layer.ln_s, |s, h| {
                layer.attn_s.apply(s, h, &mask, heads)
            })?;
            x = residual(s, x, &layer.ln_m, |s, h| layer.mlp.apply(s, h))?;
        }
        let cls = s.g.gather_rows(x, &cls_idx)?;
        let h = self.ln_f.apply(s, cls)?;
        let w = s.p(self.proj);
        let z = s.g.matmul(h, w)?;
        let features = s.g.l2_normalize_rows(z, S::of(FEATURE_EPS));
        Ok(VideoOutput { features, cls })
    }
}

/// Mean patch state per frame, `[n * T x d]`, for tokens in `layout` order.
pub fn frame_context<S: Real>(
    s: &mut Session<S>,
    tokens: Var,
    layout: &VideoLayout,
) -> Result<Var> {
    let pool = s.g.constant(layout.frame_pool::<S>());
    s.g.matmul(pool, tokens)
}
