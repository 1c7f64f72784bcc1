use std::sync::Arc;

use super::blocks::{gaussian, residual, Attention, LayerNorm, Mlp};
use super::config::{EncoderConfig, EOS, PAD, SOS};
use super::mask::TextLayout;
use crate::error::{Error, Result};
use crate::numcore::{ParamGroup, ParamId, ParamStore, Real, Rng, Session, Tensor, Var};

/// Padded captions: row `i` is `SOS w_1 .. w_len EOS PAD..`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextBatch {
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl TextBatch {
    /// Wraps word-id sequences in SOS/EOS and pads them to `max_words + 2`.
    pub fn from_words(words: &[Vec<usize>], max_words: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(words.len());
        let mut lengths = Vec::with_capacity(words.len());
        for w in words {
            if w.len() > max_words {
                return Err(Error::Config(format!(
                    "caption of {} words exceeds max_words = {max_words}",
                    w.len()
                )));
            }
            let mut row = Vec::with_capacity(max_words + 2);
            row.push(SOS);
            row.extend_from_slice(w);
            row.push(EOS);
            row.resize(max_words + 2, PAD);
            ids.push(row);
            lengths.push(w.len());
        }
        Ok(Self { ids, lengths })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Tokens of item `i` up to and including EOS.
    pub fn tokens(&self, i: usize) -> &[usize] {
        &self.ids[i][..self.lengths[i] + 2]
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            lengths: idx.iter().map(|&i| self.lengths[i]).collect(),
        }
    }
}

/// Supplies text prompts while a caption batch is encoded.
pub trait TextPrompter<S: Real> {
    /// Prompt rows per caption (`M_t`); zero disables prompting.
    fn count(&self) -> usize;

    /// Prompts entering `layer` for every caption, stacked caption-major as
    /// `[n * count x d_txt]`. `None` carries the previous prompt states forward
    /// and is not allowed at layer 0. `eos` holds the EOS states entering the
    /// layer.
    fn prompts(
        &mut self,
        s: &mut Session<S>,
        layer: usize,
        eos: Var,
        n: usize,
    ) -> Result<Option<Var>>;
}

/// No text prompts.
pub struct NoTextPrompts;

impl<S: Real> TextPrompter<S> for NoTextPrompts {
    fn count(&self) -> usize {
        0
    }

    fn prompts(&mut self, _: &mut Session<S>, _: usize, _: Var, _: usize) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// The same prompt tensor for every caption, inserted at the input layer only.
pub struct StaticTextPrompts<S> {
    pub prompts: Tensor<S>,
}

impl<S: Real> TextPrompter<S> for StaticTextPrompts<S> {
    fn count(&self) -> usize {
        self.prompts.rows()
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
        let p = s.g.constant(self.prompts.clone());
        Ok(Some(s.g.concat_rows(&vec![p; n])?))
    }
}

#[derive(Clone, Debug)]
pub struct TextLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

/// Encoder output for a caption batch.
#[derive(Clone, Copy, Debug)]
pub struct TextOutput {
    /// Unit-norm joint-space features `[n x d_embed]`.
    pub features: Var,
    /// Final EOS states `[n x d_txt]` before the output norm.
    pub eos: Var,
}

/// Causal transformer over captions whose feature is the final EOS state.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: EncoderConfig,
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<TextLayer>,
    pub ln_f: LayerNorm,
    pub proj: ParamId,
}

impl TextEncoder {
    pub fn new<S: Real>(store: &mut ParamStore<S>, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_txt;
        let out_gain = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let token_emb = gaussian(
            store,
            rng,
            "text.token_emb",
            [cfg.vocab, d],
            0.5,
            ParamGroup::Weight,
            true,
        );
        let pos_emb = gaussian(
            store,
            rng,
            "text.pos_emb",
            [cfg.text_len(), d],
            0.1,
            ParamGroup::Weight,
            true,
        );
        let layers = (0..cfg.layers)
            .map(|l| TextLayer {
                ln1: LayerNorm::new(store, &format!("text.l{l}.ln1"), d),
                attn: Attention::new(store, rng, &format!("text.l{l}.attn"), d, out_gain),
                ln2: LayerNorm::new(store, &format!("text.l{l}.ln2"), d),
                mlp: Mlp::new(
                    store,
                    rng,
                    &format!("text.l{l}.mlp"),
                    d,
                    d * cfg.mlp_ratio,
                    out_gain,
                ),
            })
            .collect();
        let ln_f = LayerNorm::new(store, "text.ln_f", d);
        let proj = gaussian(
            store,
            rng,
            "text.proj",
            [d, cfg.d_embed],
            1.0 / (d as f64).sqrt(),
            ParamGroup::Weight,
            true,
        );
        Self {
            cfg: cfg.clone(),
            token_emb,
            pos_emb,
            layers,
            ln_f,
            proj,
        }
    }

    pub fn encode<S: Real>(
        &self,
        s: &mut Session<S>,
        batch: &TextBatch,
        prompter: &mut dyn TextPrompter<S>,
    ) -> Result<TextOutput> {
        let n = batch.len();
        let m = prompter.count();
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut lens = Vec::with_capacity(n);
        for i in 0..n {
            let toks = batch.tokens(i);
            if toks.len() > self.cfg.text_len() {
                return Err(Error::Config(format!(
                    "caption {i} has {} tokens but positional table holds {}",
                    toks.len(),
                    self.cfg.text_len()
                )));
            }
            if let Some(&bad) = toks.iter().find(|&&t| t >= self.cfg.vocab) {
                return Err(Error::Config(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.cfg.vocab
                )));
            }
            ids.extend_from_slice(toks);
            pos.extend(0..toks.len());
            lens.push(toks.len());
        }
        let layout = TextLayout::new(lens, m);
        let content = layout.content_rows();
        let content_idx: Vec<usize> = (0..content).collect();
        let eos_idx: Vec<usize> = (0..n).map(|i| layout.eos_row(i)).collect();

        let tok = s.p(self.token_emb);
        let pe = s.p(self.pos_emb);
        let tok = s.g.gather_rows(tok, &ids)?;
        let pe = s.g.gather_rows(pe, &pos)?;
        let mut x = s.g.add(tok, pe)?;

        let mask = Arc::new(layout.causal_mask());
        for (l, layer) in self.layers.iter().enumerate() {
            if m > 0 {
                let eos = s.g.gather_rows(x, &eos_idx)?;
                match prompter.prompts(s, l, eos, n)? {
                    Some(p) => {
                        let kept = if l == 0 {
                            x
                        } else {
                            s.g.gather_rows(x, &content_idx)?
                        };
                        x = s.g.concat_rows(&[kept, p])?;
                    }
                    None if l == 0 => {
                        return Err(Error::Contract(
                            "text prompter supplied no input prompts".into(),
                        ))
                    }
                    None => {}
                }
            }
            let heads = self.cfg.heads;
            x = residual(s, x, &layer.ln1, |s, h| {
                layer.attn.apply(s, h, &mask, heads)
            })?;
            x = residual(s, x, &layer.ln2, |s, h| layer.mlp.apply(s, h))?;
        }
        let eos = s.g.gather_rows(x, &eos_idx)?;
        let h = self.ln_f.apply(s, eos)?;
        let w = s.p(self.proj);
        let z = s.g.matmul(h, w)?;
        let features = s.g.l2_normalize_rows(z, S::of(FEATURE_EPS));
        Ok(TextOutput { features, eos })
    }
}

pub(crate) const FEATURE_EPS: f64 = 1e-12;
