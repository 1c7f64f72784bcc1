//! Synthetic paired videos and captions with planted concept structure.
//!
//! Every concept owns a latent patch vector and a temporal envelope. A video
//! shows its concepts in consecutive temporal segments, one concept per
//! frame on all patches but one, which shows a distractor. Everything carries
//! Gaussian noise. Adaptation
//! splits pass their patches through a fixed rotation-plus-bias distortion
//! scaled by `domain_shift`. Captions expand a fixed template per concept.

mod format;

pub use format::{load, save, FEATURE_MAGIC, FORMAT_VERSION};

use serde::{Deserialize, Serialize};

use crate::encoders::{TextBatch, VideoBatch, EOS};
use crate::error::{Error, Result};
use crate::numcore::{Real, Rng, Tensor};
use crate::prompting::orthonormal_rows;
use crate::training::{EvalSet, PairedData};

/// First word id of the caption template (`a`, `person`, `and`), then concept words.
const TEMPLATE_A: usize = EOS + 1;
const TEMPLATE_PERSON: usize = EOS + 2;
const TEMPLATE_AND: usize = EOS + 3;
const FIRST_CONCEPT_WORD: usize = EOS + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Pretrain,
    AdaptTrain,
    AdaptVal,
    AdaptTest,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Pretrain,
        SplitName::AdaptTrain,
        SplitName::AdaptVal,
        SplitName::AdaptTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitName::Pretrain => "pretrain",
            SplitName::AdaptTrain => "adapt_train",
            SplitName::AdaptVal => "adapt_val",
            SplitName::AdaptTest => "adapt_test",
        }
    }

    pub fn shifted(self) -> bool {
        self != SplitName::Pretrain
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub pretrain: usize,
    pub adapt_train: usize,
    pub adapt_val: usize,
    pub adapt_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            pretrain: 256,
            adapt_train: 128,
            adapt_val: 64,
            adapt_test: 64,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: SplitName) -> usize {
        match split {
            SplitName::Pretrain => self.pretrain,
            SplitName::AdaptTrain => self.adapt_train,
            SplitName::AdaptVal => self.adapt_val,
            SplitName::AdaptTest => self.adapt_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_concepts: usize,
    pub items: SplitSizes,
    pub frames: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub vocab: usize,
    pub max_words: usize,
    pub domain_shift: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub multilabel: bool,
    /// Upper end of the per-item concept count in multi-label mode.
    pub labels_per_item: usize,
    /// Size of the shared distractor pool.
    pub distractors: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_concepts: 8,
            items: SplitSizes::default(),
            frames: 4,
            patches: 4,
            patch_dim: 16,
            vocab: 64,
            max_words: 12,
            domain_shift: 1.0,
            noise_std: 0.1,
            seed: 0,
            multilabel: true,
            labels_per_item: 3,
            distractors: 6,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("data.{field}: {why}")));
        if self.n_concepts == 0 {
            return bad("n_concepts", "must be positive");
        }
        if self.labels_per_item == 0 || self.labels_per_item > self.n_concepts {
            return bad("labels_per_item", "must lie in 1..=n_concepts");
        }
        if self.vocab < FIRST_CONCEPT_WORD + self.n_concepts {
            return bad("vocab", "too small for the template and concept words");
        }
        let words = if self.multilabel { caption_len(self.labels_per_item) } else { 3 };
        if words > self.max_words {
            return bad("max_words", "too small for the longest caption");
        }
        if self.frames == 0 || self.patches < 2 || self.patch_dim == 0 {
            return bad("patches", "need at least one frame, two patches and a positive patch_dim");
        }
        if !(0.0..=1.0).contains(&self.domain_shift) {
            return bad("domain_shift", "must lie in [0, 1]");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std", "must be non-negative");
        }
        if self.distractors == 0 {
            return bad("distractors", "must be positive");
        }
        Ok(())
    }

    pub fn item_floats(&self) -> usize {
        self.frames * self.patches * self.patch_dim
    }
}

fn caption_len(concepts: usize) -> usize {
    3 * concepts + concepts.saturating_sub(1)
}

/// Caption words for a concept set: `a person <c1> and a person <c2> ...`.
pub fn caption(concepts: &[usize]) -> Vec<usize> {
    let mut w = Vec::with_capacity(caption_len(concepts.len()));
    for (i, &c) in concepts.iter().enumerate() {
        if i > 0 {
            w.push(TEMPLATE_AND);
        }
        w.extend([TEMPLATE_A, TEMPLATE_PERSON, FIRST_CONCEPT_WORD + c]);
    }
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: u64,
    /// Concept ids, which are also the labels.
    pub labels: Vec<usize>,
    pub words: Vec<usize>,
    /// `[T x N_p x patch_dim]`, row-major.
    pub patches: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: SplitName,
    pub items: Vec<Item>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub splits: Vec<Split>,
    /// Nearest-centroid accuracy on clean single-concept probes.
    pub separability: f64,
}

/// Fixed world of one seed: concept latents, envelopes, distractors, shift.
struct World {
    concepts: Vec<Vec<f64>>,
    envelopes: Vec<Vec<f64>>,
    distractors: Vec<Vec<f64>>,
    rotation: Tensor<f64>,
    bias: Vec<f64>,
}

impl World {
    fn new(cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.patch_dim;
        let scale = (d as f64).sqrt();
        let concepts = if cfg.n_concepts <= d {
            let q = orthonormal_rows::<f64>(cfg.n_concepts, d, rng)?;
            (0..cfg.n_concepts).map(|r| q.row(r).iter().map(|x| x * scale).collect()).collect()
        } else {
            (0..cfg.n_concepts).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
        };
        let envelopes = (0..cfg.n_concepts)
            .map(|_| {
                let phase = rng.uniform() * std::f64::consts::TAU;
                (0..cfg.frames)
                    .map(|t| 1.0 + 0.5 * (phase + std::f64::consts::TAU * t as f64 / cfg.frames as f64).sin())
                    .collect()
            })
            .collect();
        let distractors = (0..cfg.distractors)
            .map(|_| (0..d).map(|_| 0.7 * rng.normal()).collect())
            .collect();
        let rotation = orthonormal_rows::<f64>(d, d, rng)?;
        let bias = (0..d).map(|_| rng.normal()).collect();
        Ok(Self {
            concepts,
            envelopes,
            distractors,
            rotation,
            bias,
        })
    }

    /// Patch features of one video before noise and shift.
    fn render(&self, cfg: &GeneratorConfig, labels: &[usize], rng: &mut Rng, shift: f64) -> Vec<f32> {
        let d = cfg.patch_dim;
        let mut out = Vec::with_capacity(cfg.item_floats());
        let mut x = vec![0.0; d];
        for t in 0..cfg.frames {
            let distractor = &self.distractors[rng.below(self.distractors.len())];
            let slot = rng.below(cfg.patches);
            for p in 0..cfg.patches {
                if p == slot {
                    x.copy_from_slice(distractor);
                } else {
                    let c = labels[t * labels.len() / cfg.frames];
                    let e = self.envelopes[c][t];
                    for (xi, ci) in x.iter_mut().zip(&self.concepts[c]) {
                        *xi = e * ci;
                    }
                }
                for xi in x.iter_mut() {
                    *xi += cfg.noise_std * rng.normal();
                }
                if shift > 0.0 {
                    let r = &self.rotation;
                    let rotated: Vec<f64> = (0..d)
                        .map(|i| (0..d).map(|j| r.get(i, j) * x[j]).sum::<f64>() + self.bias[i])
                        .collect();
                    for (xi, ri) in x.iter_mut().zip(rotated) {
                        *xi = (1.0 - shift) * *xi + shift * ri;
                    }
                }
                out.extend(x.iter().map(|&v| v as f32));
            }
        }
        out
    }
}

fn draw_labels(cfg: &GeneratorConfig, rng: &mut Rng) -> Vec<usize> {
    let count = if cfg.multilabel { 1 + rng.below(cfg.labels_per_item) } else { 1 };
    let mut pool: Vec<usize> = (0..cfg.n_concepts).collect();
    rng.shuffle(&mut pool);
    pool.truncate(count);
    pool
}

/// Builds all four splits from `cfg.seed`.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let world = World::new(cfg, &mut root.fork(0))?;
    let mut next_id = 0u64;
    let mut splits = Vec::new();
    for (s, name) in SplitName::ALL.into_iter().enumerate() {
        let mut rng = root.fork(10 + s as u64);
        let shift = if name.shifted() { cfg.domain_shift } else { 0.0 };
        let items = (0..cfg.items.get(name))
            .map(|_| {
                let labels = draw_labels(cfg, &mut rng);
                let patches = world.render(cfg, &labels, &mut rng, shift);
                let item = Item {
                    id: next_id,
                    words: caption(&labels),
                    labels,
                    patches,
                };
                next_id += 1;
                item
            })
            .collect();
        splits.push(Split { name, items });
    }
    let separability = centroid_probe(cfg, &world, &mut root.fork(99));
    Ok(Dataset {
        config: cfg.clone(),
        splits,
        separability,
    })
}

/// Mean patch feature of an item.
pub fn mean_patch(item: &Item, patch_dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; patch_dim];
    let n = item.patches.len() / patch_dim;
    for p in item.patches.chunks(patch_dim) {
        for (mi, &x) in m.iter_mut().zip(p) {
            *mi += x as f64 / n as f64;
        }
    }
    m
}

/// Nearest-centroid accuracy on fresh unshifted single-concept videos:
/// centroids from one half, accuracy on the other.
fn centroid_probe(cfg: &GeneratorConfig, world: &World, rng: &mut Rng) -> f64 {
    let per = 16;
    let d = cfg.patch_dim;
    let mut fit = vec![vec![0.0; d]; cfg.n_concepts];
    let mut probes = Vec::new();
    for c in 0..cfg.n_concepts {
        for i in 0..2 * per {
            let item = Item {
                id: 0,
                labels: vec![c],
                words: Vec::new(),
                patches: world.render(cfg, &[c], rng, 0.0),
            };
            let m = mean_patch(&item, d);
            if i < per {
                for (f, x) in fit[c].iter_mut().zip(&m) {
                    *f += x / per as f64;
                }
            } else {
                probes.push((c, m));
            }
        }
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let right = probes
        .iter()
        .filter(|(c, m)| {
            let best = (0..cfg.n_concepts)
                .min_by(|&a, &b| dist(m, &fit[a]).total_cmp(&dist(m, &fit[b])))
                .expect("at least one concept");
            best == *c
        })
        .count();
    right as f64 / probes.len() as f64
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &Split {
        self.splits.iter().find(|s| s.name == name).expect("every split is present")
    }

    /// One caption per concept, in concept order.
    pub fn class_captions(&self) -> Vec<Vec<usize>> {
        (0..self.config.n_concepts).map(|c| caption(&[c])).collect()
    }

    pub fn pairs<S: Real>(&self, name: SplitName) -> Result<PairedData<S>> {
        let cfg = &self.config;
        let items = &self.split(name).items;
        let mut data = Vec::with_capacity(items.len() * cfg.item_floats());
        for it in items {
            data.extend(it.patches.iter().map(|&x| S::of(x as f64)));
        }
        let shape = vec![items.len(), cfg.frames, cfg.patches, cfg.patch_dim];
        let words: Vec<Vec<usize>> = items.iter().map(|i| i.words.clone()).collect();
        Ok(PairedData {
            videos: VideoBatch::new(Tensor::new(shape, data)?)?,
            texts: TextBatch::from_words(&words, cfg.max_words)?,
            labels: items.iter().map(|i| i.labels.clone()).collect(),
        })
    }

    pub fn eval_set<S: Real>(&self, name: SplitName) -> Result<EvalSet<S>> {
        Ok(EvalSet {
            data: self.pairs(name)?,
            class_texts: TextBatch::from_words(&self.class_captions(), self.config.max_words)?,
            multilabel: self.config.multilabel,
        })
    }
}

#[cfg(test)]
mod tests;
