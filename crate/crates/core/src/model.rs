//! The dual encoder together with the add-on parameters of one adaptation
//! method, and the forward pass that wires them in.

use serde::{Deserialize, Serialize};

use crate::encoders::{
    AttentionMode, EncoderConfig, NoTextPrompts, PromptSlots, TextBatch, TextEncoder, TextPrompter,
    VideoBatch, VideoEncoder, VideoPrompter,
};
use crate::error::{Error, Result};
use crate::numcore::{ParamGroup, ParamId, ParamStore, Real, Rng, Session, Tensor, Var};
use crate::prompting::{
    orthonormal_rows, project, recon_losses, record, select_sampled, select_topk, synthesize, Cmm,
    Method, PromptConfig, QueryMode, SamplerState, TextSynthesis,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub method: Method,
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            method: Method::EgoVpa,
            encoder: EncoderConfig::toy(),
            prompt: PromptConfig::toy(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompt.validate(self.encoder.layers)
    }

    /// Layers that receive fresh frame-specific prompts.
    pub fn injection_layers(&self) -> usize {
        self.prompt.boundary.max(1)
    }

    fn synth_text(&self) -> bool {
        self.method == Method::EgoVpa && self.prompt.cross_modal
    }

    fn static_text(&self) -> bool {
        self.method.static_text_prompts()
            || (self.method == Method::EgoVpa && !self.prompt.cross_modal)
    }
}

/// Parameters added by the adaptation method; all live outside the backbone.
#[derive(Clone, Debug, Default)]
pub struct Addons {
    pub text_prompts: Option<ParamId>,
    /// One `[M_v x d_vid]` prompt set per layer.
    pub video_prompts: Vec<ParamId>,
    pub cmm: Option<Cmm>,
    pub basis: Option<ParamId>,
    pub h_vid: Option<ParamId>,
    pub g_vid: Option<ParamId>,
    pub h_txt: Option<ParamId>,
    pub g_txt: Option<ParamId>,
}

/// Where basis selections come from during a forward pass.
pub enum Selector<'a> {
    /// Top-k, counts untouched.
    Eval,
    /// Training-time query; tallies into `counts`.
    Train {
        mode: QueryMode,
        sampler: &'a mut SamplerState,
        counts: &'a mut [u64],
    },
    /// Re-issues recorded selections in order.
    Replay { tape: &'a [Vec<usize>], at: usize },
}

impl Selector<'_> {
    fn pick<S: Real>(
        &mut self,
        hz: &Tensor<S>,
        f: &Tensor<S>,
        k: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(hz.rows());
        for r in 0..hz.rows() {
            let q = hz.row(r);
            let idx = match self {
                Selector::Eval => select_topk(q, f, k).indices,
                Selector::Train {
                    mode,
                    sampler,
                    counts,
                } => {
                    let idx = match mode {
                        QueryMode::TopK => select_topk(q, f, k).indices,
                        QueryMode::Sampled => select_sampled(q, f, k, counts, sampler).indices,
                    };
                    record(counts, &idx);
                    idx
                }
                Selector::Replay { tape, at } => {
                    let idx = tape
                        .get(*at)
                        .cloned()
                        .ok_or_else(|| Error::Contract("selection tape exhausted".into()))?;
                    *at += 1;
                    idx
                }
            };
            out.push(idx);
        }
        Ok(out)
    }
}

/// Reconstruction residual vectors collected while prompts were synthesized.
#[derive(Clone, Debug, Default)]
pub struct SynParts {
    /// Per synthesizing layer, `[n * T x 1]`.
    pub video: Vec<Var>,
    /// Per synthesizing layer, `[n x 1]`.
    pub text: Vec<Var>,
    pub basis: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub video: Var,
    pub text: Var,
    pub syn: SynParts,
    /// Every selection made, in order, for replay.
    pub tape: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct DualEncoder<S: Real> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub text: TextEncoder,
    pub video: VideoEncoder,
    pub addons: Addons,
}

impl<S: Real> DualEncoder<S> {
    /// Backbone and add-ons from independent streams of `seed`, so the backbone
    /// is the same for every method.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let mut store = ParamStore::new();
        let mut brng = root.fork(1);
        let text = TextEncoder::new(&mut store, &cfg.encoder, &mut brng);
        let video = VideoEncoder::new(&mut store, &cfg.encoder, &mut brng);
        let mut arng = root.fork(2);
        let addons = build_addons(&mut store, &cfg, &mut arng)?;
        let mut m = Self {
            cfg,
            store,
            text,
            video,
            addons,
        };
        m.mark_trainable();
        Ok(m)
    }

    /// Copies backbone values from a pretrained store; returns how many arrays
    /// were taken.
    pub fn adopt_backbone(&mut self, pretrained: &ParamStore<S>) -> Result<usize> {
        let n = self.store.load_from(pretrained)?;
        let want = self.store.entries().filter(|(_, e)| e.backbone).count();
        if n < want {
            return Err(Error::Contract(format!(
                "pretrained store supplied {n} of {want} backbone arrays"
            )));
        }
        Ok(n)
    }

    pub fn method(&self) -> Method {
        self.cfg.method
    }

    fn mark_trainable(&mut self) {
        match self.cfg.method {
            Method::ZeroShot => self.store.set_trainable_where(|_| false),
            Method::Full => self.store.set_trainable_where(|e| e.backbone),
            Method::Bias => self
                .store
                .set_trainable_where(|e| e.backbone && e.group == ParamGroup::Bias),
            _ => self.store.set_trainable_where(|e| !e.backbone),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.store.count_where(|e| e.trainable)
    }

    pub fn backbone_count(&self) -> usize {
        self.store.count_where(|e| e.backbone)
    }

    /// SHA-256 over the backbone parameter values.
    /// Basis rows, if the method has a basis.
    pub fn basis(&self) -> Option<&Tensor<S>> {
        self.addons.basis.map(|id| self.store.value(id))
    }

    pub fn backbone_checksum(&self) -> String {
        self.store.checksum_where(|e| e.backbone)
    }

    /// Encodes a paired batch. Both towers see their method's prompts.
    pub fn forward(
        &self,
        s: &mut Session<S>,
        videos: &VideoBatch<S>,
        texts: &TextBatch,
        sel: &mut Selector<'_>,
    ) -> Result<Forward> {
        let mut syn = SynParts::default();
        let mut tape = Vec::new();
        let video = self.encode_videos(s, videos, sel, &mut syn, &mut tape)?;
        let text = self.encode_texts(s, texts, sel, &mut syn, &mut tape)?;
        Ok(Forward {
            video,
            text,
            syn,
            tape,
        })
    }

    pub fn encode_videos(
        &self,
        s: &mut Session<S>,
        videos: &VideoBatch<S>,
        sel: &mut Selector<'_>,
        syn: &mut SynParts,
        tape: &mut Vec<Vec<usize>>,
    ) -> Result<Var> {
        let mut p = VideoSide {
            model: self,
            sel,
            syn,
            tape,
        };
        Ok(self.video.encode(s, videos, &mut p)?.features)
    }

    pub fn encode_texts(
        &self,
        s: &mut Session<S>,
        texts: &TextBatch,
        sel: &mut Selector<'_>,
        syn: &mut SynParts,
        tape: &mut Vec<Vec<usize>>,
    ) -> Result<Var> {
        if self.cfg.synth_text() {
            let mut p = SynthText {
                model: self,
                sel,
                syn,
                tape,
            };
            return Ok(self.text.encode(s, texts, &mut p)?.features);
        }
        match self.addons.text_prompts {
            Some(id) => Ok(self
                .text
                .encode(
                    s,
                    texts,
                    &mut ParamTextPrompts {
                        id,
                        count: self.cfg.prompt.m_t,
                    },
                )?
                .features),
            None => Ok(self.text.encode(s, texts, &mut NoTextPrompts)?.features),
        }
    }

    /// Synthesizes prompts for queries `z [Q x d_in]` through encoder `h` and
    /// decoder `g`; returns `[Q * k x d_out]` prompts and the residuals.
    fn synth(
        &self,
        s: &mut Session<S>,
        z: Var,
        h: ParamId,
        g: ParamId,
        sel: &mut Selector<'_>,
        tape: &mut Vec<Vec<usize>>,
    ) -> Result<(Var, Var, Var)> {
        let basis = self.addons.basis.expect("basis exists for synthesis");
        let (f, hw, gw) = (s.p(basis), s.p(h), s.p(g));
        let hz = project(&mut s.g, z, hw)?;
        let picks = sel.pick(s.g.value(hz), s.g.value(f), self.cfg.prompt.top_k)?;
        let flat: Vec<usize> = picks.iter().flatten().copied().collect();
        let prompts = synthesize(&mut s.g, f, gw, &flat)?;
        let resid = recon_losses(&mut s.g, hz, f, &picks)?;
        tape.extend(picks);
        Ok((prompts, resid, f))
    }
}

fn build_addons<S: Real>(
    store: &mut ParamStore<S>,
    cfg: &ModelConfig,
    rng: &mut Rng,
) -> Result<Addons> {
    let enc = &cfg.encoder;
    let p = &cfg.prompt;
    let mut a = Addons::default();
    let gauss = |store: &mut ParamStore<S>,
                 rng: &mut Rng,
                 name: &str,
                 r: usize,
                 c: usize,
                 std: f64,
                 group| {
        let data = (0..r * c).map(|_| S::of(std * rng.normal())).collect();
        store.add(name, Tensor::matrix(r, c, data), group, false)
    };
    if cfg.static_text() {
        a.text_prompts = Some(gauss(
            store,
            rng,
            "prompt.text",
            p.m_t,
            enc.d_txt,
            0.5,
            ParamGroup::Prompt,
        ));
    }
    if cfg.method.shared_video_prompts() {
        a.video_prompts = (0..enc.layers)
            .map(|l| {
                gauss(
                    store,
                    rng,
                    &format!("prompt.video.l{l}"),
                    p.m_v,
                    enc.d_vid,
                    0.5,
                    ParamGroup::Prompt,
                )
            })
            .collect();
    }
    if cfg.method.uses_cmm() {
        a.cmm = Some(Cmm::new(store, rng, enc.d_vid, enc.frames, p.m_v));
    }
    if cfg.method.uses_basis() {
        let f = orthonormal_rows::<S>(p.basis_size, p.d_f, rng)?;
        a.basis = Some(store.add("basis.f", f, ParamGroup::Basis, false));
        let (dv, dt, df) = (enc.d_vid, enc.d_txt, p.d_f);
        a.h_vid = Some(gauss(
            store,
            rng,
            "adapter.video.h",
            dv,
            df,
            1.0 / (dv as f64).sqrt(),
            ParamGroup::Adapter,
        ));
        a.g_vid = Some(gauss(
            store,
            rng,
            "adapter.video.g",
            df,
            dv,
            0.5,
            ParamGroup::Adapter,
        ));
        if p.cross_modal {
            a.h_txt = Some(gauss(
                store,
                rng,
                "adapter.text.h",
                dt,
                df,
                1.0 / (dt as f64).sqrt(),
                ParamGroup::Adapter,
            ));
            a.g_txt = Some(gauss(
                store,
                rng,
                "adapter.text.g",
                df,
                dt,
                0.5,
                ParamGroup::Adapter,
            ));
        }
    }
    Ok(a)
}

fn repeat<S: Real>(s: &mut Session<S>, v: Var, n: usize) -> Result<Var> {
    s.g.concat_rows(&vec![v; n])
}

struct ParamTextPrompts {
    id: ParamId,
    count: usize,
}

impl<S: Real> TextPrompter<S> for ParamTextPrompts {
    fn count(&self) -> usize {
        self.count
    }

    fn prompts(
        &mut self,
        s: &mut Session<S>,
        layer: usize,
        _: Var,
        n: usize,
    ) -> Result<Option<Var>> {
        if layer > 0 {
            return Ok(None);
        }
        let p = s.p(self.id);
        Ok(Some(repeat(s, p, n)?))
    }
}

struct SynthText<'m, 'a, 'b, S: Real> {
    model: &'m DualEncoder<S>,
    sel: &'a mut Selector<'b>,
    syn: &'a mut SynParts,
    tape: &'a mut Vec<Vec<usize>>,
}

impl<S: Real> TextPrompter<S> for SynthText<'_, '_, '_, S> {
    fn count(&self) -> usize {
        self.model.cfg.prompt.top_k
    }

    fn prompts(
        &mut self,
        s: &mut Session<S>,
        layer: usize,
        eos: Var,
        _: usize,
    ) -> Result<Option<Var>> {
        let per_layer = self.model.cfg.prompt.text_synthesis == TextSynthesis::PerLayer;
        // query with the EOS state entering this layer
        if layer > 0 && !(per_layer && layer < self.model.cfg.injection_layers()) {
            return Ok(None);
        }
        let z = eos;
        let a = &self.model.addons;
        let (p, resid, f) = self.model.synth(
            s,
            z,
            a.h_txt.expect("text adapter"),
            a.g_txt.expect("text adapter"),
            self.sel,
            self.tape,
        )?;
        self.syn.text.push(resid);
        self.syn.basis = Some(f);
        Ok(Some(p))
    }
}

struct VideoSide<'m, 'a, 'b, S: Real> {
    model: &'m DualEncoder<S>,
    sel: &'a mut Selector<'b>,
    syn: &'a mut SynParts,
    tape: &'a mut Vec<Vec<usize>>,
}

impl<S: Real> VideoPrompter<S> for VideoSide<'_, '_, '_, S> {
    fn slots(&self) -> PromptSlots {
        let cfg = &self.model.cfg;
        match cfg.method {
            Method::Vpt | Method::Vop => PromptSlots::Shared(cfg.prompt.m_v),
            Method::VopC | Method::VopFc => PromptSlots::PerFrame(cfg.prompt.m_v),
            Method::EgoVpa => PromptSlots::PerFrame(cfg.prompt.top_k),
            _ => PromptSlots::None,
        }
    }

    fn mode(&self, layer: usize) -> AttentionMode {
        let cfg = &self.model.cfg;
        if cfg.method.intra_below_boundary() && layer < cfg.prompt.boundary {
            AttentionMode::Intra
        } else {
            AttentionMode::Inter
        }
    }

    fn needs_context(&self, layer: usize) -> bool {
        self.model.cfg.method.frame_prompts() && layer < self.model.cfg.injection_layers()
    }

    fn prompts(
        &mut self,
        s: &mut Session<S>,
        layer: usize,
        ctx: Option<Var>,
        n: usize,
    ) -> Result<Option<Var>> {
        let m = self.model;
        let a = &m.addons;
        match m.cfg.method {
            Method::Vpt | Method::Vop => {
                let p = s.p(a.video_prompts[layer]);
                Ok(Some(repeat(s, p, n)?))
            }
            Method::VopC | Method::VopFc | Method::EgoVpa => {
                let Some(ctx) = ctx else { return Ok(None) };
                if let Some(cmm) = &a.cmm {
                    return Ok(Some(cmm.generate(s, ctx)?));
                }
                let (p, resid, f) = m.synth(
                    s,
                    ctx,
                    a.h_vid.expect("video adapter"),
                    a.g_vid.expect("video adapter"),
                    self.sel,
                    self.tape,
                )?;
                self.syn.video.push(resid);
                self.syn.basis = Some(f);
                Ok(Some(p))
            }
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::count_params;

    fn batch(cfg: &EncoderConfig, n: usize, seed: u64) -> (VideoBatch<f64>, TextBatch) {
        let mut rng = Rng::new(seed);
        let shape = [n, cfg.frames, cfg.patches, cfg.patch_dim];
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.normal())
            .collect();
        let v = VideoBatch::new(Tensor::new(shape.to_vec(), data).unwrap()).unwrap();
        let words: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                (0..3 + i % 4)
                    .map(|_| 3 + rng.below(cfg.vocab - 3))
                    .collect()
            })
            .collect();
        (v, TextBatch::from_words(&words, cfg.max_words).unwrap())
    }

    fn model(method: Method) -> DualEncoder<f64> {
        DualEncoder::new(
            ModelConfig {
                method,
                ..Default::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn store_matches_analytic_accounting() {
        for method in Method::ALL {
            let m = model(method);
            let b = count_params(&m.cfg.encoder, &m.cfg.prompt, method);
            assert_eq!(m.trainable_count() as u64, b.trainable, "{method}");
            assert_eq!(m.backbone_count() as u64, b.backbone, "{method}");
        }
    }

    #[test]
    fn backbone_is_shared_across_methods() {
        let reference = model(Method::ZeroShot).backbone_checksum();
        for method in Method::ALL {
            assert_eq!(model(method).backbone_checksum(), reference, "{method}");
        }
    }

    #[test]
    fn every_method_yields_unit_features() {
        let n = 3;
        for method in Method::ALL {
            let m = model(method);
            let (v, t) = batch(&m.cfg.encoder, n, 1);
            let mut s = Session::inference(&m.store);
            let out = m.forward(&mut s, &v, &t, &mut Selector::Eval).unwrap();
            for var in [out.video, out.text] {
                let x = s.g.value(var);
                assert_eq!(x.shape(), &[n, m.cfg.encoder.d_embed]);
                for r in 0..n {
                    let norm: f64 = x.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-9);
                }
            }
            let synth = method == Method::EgoVpa;
            assert_eq!(!out.syn.video.is_empty(), synth, "{method}");
            assert_eq!(!out.syn.text.is_empty(), synth, "{method}");
        }
    }

    #[test]
    fn prompts_change_features() {
        let (v, t) = batch(&EncoderConfig::toy(), 2, 2);
        let zs = model(Method::ZeroShot);
        let mut s = Session::inference(&zs.store);
        let base = zs.forward(&mut s, &v, &t, &mut Selector::Eval).unwrap();
        let base = s.g.value(base.video).clone();
        let ego = model(Method::EgoVpa);
        let mut s = Session::inference(&ego.store);
        let out = ego.forward(&mut s, &v, &t, &mut Selector::Eval).unwrap();
        assert!(s
            .g
            .value(out.video)
            .data()
            .iter()
            .zip(base.data())
            .any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn replay_reproduces_sampled_forward() {
        let m = model(Method::EgoVpa);
        let (v, t) = batch(&m.cfg.encoder, 2, 3);
        let mut counts = vec![0u64; m.cfg.prompt.basis_size];
        let mut sampler = SamplerState::new(0.3, 0.1, Rng::new(9));
        let mut s = Session::new(&m.store);
        let mut sel = Selector::Train {
            mode: QueryMode::Sampled,
            sampler: &mut sampler,
            counts: &mut counts,
        };
        let first = m.forward(&mut s, &v, &t, &mut sel).unwrap();
        let want = s.g.value(first.video).clone();
        let picks = first.tape.len();
        // T frames x injection layers for video, one caption query per item
        assert_eq!(
            picks,
            2 * m.cfg.encoder.frames * m.cfg.injection_layers() + 2
        );
        assert_eq!(
            counts.iter().sum::<u64>() as usize,
            picks * m.cfg.prompt.top_k
        );

        let mut s = Session::new(&m.store);
        let mut sel = Selector::Replay {
            tape: &first.tape,
            at: 0,
        };
        let again = m.forward(&mut s, &v, &t, &mut sel).unwrap();
        assert_eq!(s.g.value(again.video), &want);
        assert_eq!(again.tape, first.tape);
    }
}
