//! Contrastive adaptation: losses, the gamma schedule, AdamW and the epoch loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::{TextBatch, VideoBatch};
use crate::error::{Error, Result};
use crate::evalmetrics;
use crate::model::{DualEncoder, Selector, SynParts};
use crate::numcore::{Graph, ParamGroup, ParamId, ParamStore, Real, Rng, Session, Tensor, Var};
use crate::prompting::{gram_offdiag_max, orth_penalty, renormalize_rows, syn_loss, Method, OrthPenalty, SamplerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub orth: OrthPenalty,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 0.1,
            orth: OrthPenalty::Squared,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("loss.lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Share of the epochs over which gamma climbs from 0 to 1.
    pub ramp_fraction: f64,
    /// Evaluate on the validation split every this many epochs (0 = only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 1e-2,
            weight_decay: 0.01,
            schedule: LrSchedule::Constant,
            seed: 0,
            ramp_fraction: 0.5,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("train.lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return Err(Error::Config("train.ramp_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Symmetric InfoNCE over a batch of paired unit features `v`, `t` (`n x d`).
pub fn info_nce<S: Real>(g: &mut Graph<S>, v: Var, t: Var, tau: f64) -> Result<Var> {
    let n = g.value(v).rows();
    let tt = g.transpose(t);
    let sim = g.matmul(v, tt)?;
    let logits = g.scale(sim, S::of(1.0 / tau));
    let v2t = g.log_softmax_rows(logits);
    let lt = g.transpose(logits);
    let t2v = g.log_softmax_rows(lt);
    let a = g.diag(v2t)?;
    let b = g.diag(t2v)?;
    let both = g.add(a, b)?;
    let s = g.sum(both);
    Ok(g.scale(s, S::of(-1.0 / n as f64)))
}

/// `L_cl + lambda * L_syn`; without a synthesis term the contrastive loss alone.
pub fn total_loss<S: Real>(g: &mut Graph<S>, cl: Var, syn: Option<Var>, lambda: f64) -> Result<Var> {
    match syn {
        Some(syn) => {
            let w = g.scale(syn, S::of(lambda));
            g.add(cl, w)
        }
        None => Ok(cl),
    }
}

/// Linear ramp `epoch / (ramp_fraction * total)`, clamped to `[0, 1]`.
pub fn gamma_at(epoch: usize, total: usize, ramp_fraction: f64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    (epoch as f64 / (ramp_fraction * total as f64)).clamp(0.0, 1.0)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor<S>, Tensor<S>)>,
}

impl<S: Real> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter of `store` from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, e) in store.entries_mut() {
            if !e.trainable {
                continue;
            }
            let decay = match e.group {
                ParamGroup::Basis | ParamGroup::Bias => 0.0,
                _ => self.weight_decay,
            };
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(e.value.shape()), Tensor::zeros(e.value.shape())));
            adamw_update(
                e.value.data_mut(),
                e.grad.data(),
                m.data_mut(),
                v.data_mut(),
                [self.beta1, self.beta2, self.eps, c1, c2, lr, decay],
            );
        }
    }
}

fn adamw_update<S: Real>(x: &mut [S], g: &[S], m: &mut [S], v: &mut [S], h: [f64; 7]) {
    let [b1, b2, eps, c1, c2, lr, decay] = h;
    for i in 0..x.len() {
        let gi = g[i].as_f64();
        let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
        let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
        m[i] = S::of(mi);
        v[i] = S::of(vi);
        let xi = x[i].as_f64();
        let upd = lr * (mi / c1) / ((vi / c2).sqrt() + eps) + lr * decay * xi;
        x[i] = S::of(xi - upd);
    }
}

/// Paired videos and captions with their label sets.
#[derive(Clone, Debug)]
pub struct PairedData<S> {
    pub videos: VideoBatch<S>,
    pub texts: TextBatch,
    pub labels: Vec<Vec<usize>>,
}

impl<S: Real> PairedData<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            videos: self.videos.select(idx),
            texts: self.texts.select(idx),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// The first `ceil(fraction * len)` items after a seeded shuffle.
    pub fn fraction(&self, fraction: f64, seed: u64) -> Self {
        let n = ((fraction * self.len() as f64).ceil() as usize).clamp(1.min(self.len()), self.len());
        let mut idx: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).fork(0xF4AC).shuffle(&mut idx);
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }
}

/// Evaluation inputs: paired data plus one caption per class.
#[derive(Clone, Debug)]
pub struct EvalSet<S> {
    pub data: PairedData<S>,
    pub class_texts: TextBatch,
    pub multilabel: bool,
}

/// Metric values keyed by name (`map`, `top1`, `mean_class`, `t2v_map`, ...).
pub type Metrics = BTreeMap<String, f64>;

/// Unit features of every item, encoded in chunks with top-k selection.
pub fn encode_all<S: Real>(model: &DualEncoder<S>, data: &PairedData<S>, chunk: usize) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut vid = Vec::new();
    let mut txt = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let b = data.select(part);
        let mut s = Session::inference(&model.store);
        let out = model.forward(&mut s, &b.videos, &b.texts, &mut Selector::Eval)?;
        vid.extend(rows_of(s.g.value(out.video)));
        txt.extend(rows_of(s.g.value(out.text)));
    }
    Ok((Tensor::from_rows(&vid), Tensor::from_rows(&txt)))
}

pub fn encode_texts<S: Real>(model: &DualEncoder<S>, texts: &TextBatch) -> Result<Tensor<S>> {
    let mut s = Session::inference(&model.store);
    let mut syn = SynParts::default();
    let v = model.encode_texts(&mut s, texts, &mut Selector::Eval, &mut syn, &mut Vec::new())?;
    Ok(s.g.value(v).clone())
}

fn rows_of<S: Real>(t: &Tensor<S>) -> Vec<Vec<S>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Classification against the class captions plus two-way retrieval.
pub fn evaluate<S: Real>(model: &DualEncoder<S>, set: &EvalSet<S>) -> Result<Metrics> {
    let (vid, txt) = encode_all(model, &set.data, 32)?;
    let classes = encode_texts(model, &set.class_texts)?;
    let to64 = |t: &Tensor<S>| -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).iter().map(|x| x.as_f64()).collect()).collect()
    };
    let (v, t, c) = (to64(&vid), to64(&txt), to64(&classes));
    let scores = evalmetrics::similarity(&v, &c);
    let mut m = Metrics::new();
    if set.multilabel {
        let rel = evalmetrics::multi_hot(&set.data.labels, c.len());
        m.insert("map".into(), evalmetrics::multilabel_map(&scores, &rel)?.value);
    } else {
        let labels: Vec<usize> = set.data.labels.iter().map(|l| l[0]).collect();
        let acc = evalmetrics::accuracy(&scores, &labels)?;
        m.insert("top1".into(), acc.top1);
        m.insert("mean_class".into(), acc.mean_class);
    }
    let sim = evalmetrics::similarity(&v, &t);
    let rel = evalmetrics::label_overlap(&set.data.labels);
    let r = evalmetrics::retrieval_metrics(&sim, &rel)?;
    m.insert("v2t_map".into(), r.v2t.map);
    m.insert("v2t_ndcg".into(), r.v2t.ndcg);
    m.insert("t2v_map".into(), r.t2v.map);
    m.insert("t2v_ndcg".into(), r.t2v.ndcg);
    Ok(m)
}

/// One line of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_cl: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_syn: Option<f64>,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gram_offdiag_max: Option<f64>,
    /// Basis selection counts over the epoch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selection: Option<Vec<u64>>,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Total loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Validation metrics of the final model.
    pub metrics: Metrics,
}

/// Component values of one step's loss.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: f64,
    pub cl: f64,
    pub syn: Option<f64>,
}

/// Loss vars of one batch and the basis selections behind them.
pub struct BatchLoss {
    pub total: Var,
    pub cl: Var,
    pub syn: Option<Var>,
    pub tape: Vec<Vec<usize>>,
}

/// Builds the loss graph of one batch.
pub fn batch_loss<S: Real>(
    model: &DualEncoder<S>,
    s: &mut Session<S>,
    batch: &PairedData<S>,
    sel: &mut Selector<'_>,
    loss: &LossConfig,
) -> Result<BatchLoss> {
    let out = model.forward(s, &batch.videos, &batch.texts, sel)?;
    let cl = info_nce(&mut s.g, out.video, out.text, loss.tau)?;
    let syn = match (model.method(), out.syn.basis) {
        (Method::EgoVpa, Some(basis)) => {
            let orth = orth_penalty(&mut s.g, basis, loss.orth)?;
            Some(syn_loss(&mut s.g, &out.syn.video, &out.syn.text, orth, batch.len())?)
        }
        _ => None,
    };
    let total = total_loss(&mut s.g, cl, syn, loss.lambda)?;
    Ok(BatchLoss {
        total,
        cl,
        syn,
        tape: out.tape,
    })
}

/// Trains the method's trainable set on `train`; evaluates on `val` when given.
///
/// `on_epoch` receives each log record as soon as it is complete.
pub fn train<S: Real>(
    model: &mut DualEncoder<S>,
    train: &PairedData<S>,
    val: Option<&EvalSet<S>>,
    cfg: &TrainConfig,
    loss: &LossConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    loss.validate()?;
    let mut report = TrainReport::default();
    if model.method() == Method::ZeroShot || model.trainable_count() == 0 {
        if let Some(val) = val {
            report.metrics = evaluate(model, val)?;
        }
        return Ok(report);
    }
    if train.len() < 2 {
        return Err(Error::Contract("training needs at least two items".into()));
    }
    let frozen_before = frozen_checksum(model);
    let root = Rng::new(cfg.seed);
    let mut sampler_rng = root.fork(2);
    let mut opt = AdamW::new(cfg.weight_decay);
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let basis_size = model.addons.basis.map_or(0, |_| model.cfg.prompt.basis_size);
    let query = model.cfg.prompt.query;

    for epoch in 0..cfg.epochs {
        let gamma = gamma_at(epoch, cfg.epochs, cfg.ramp_fraction);
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.fork(1).fork(epoch as u64).shuffle(&mut order);
        let mut counts = vec![0u64; basis_size];
        let mut sampler = SamplerState::new(gamma, model.cfg.prompt.sim_temperature, sampler_rng.fork(epoch as u64));
        let (mut sum_cl, mut sum_syn, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = train.select(chunk);
            let step = report.step_losses.len();
            let (parts, grads) = {
                let mut s = Session::new(&model.store);
                let mut sel = Selector::Train {
                    mode: query,
                    sampler: &mut sampler,
                    counts: &mut counts,
                };
                let BatchLoss { total, cl, syn, .. } =
                    batch_loss(model, &mut s, &batch, &mut sel, loss)?;
                let parts = StepLoss {
                    total: s.g.value(total).item().as_f64(),
                    cl: s.g.value(cl).item().as_f64(),
                    syn: syn.map(|v| s.g.value(v).item().as_f64()),
                };
                if !parts.total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, step {step}: total {}, contrastive {}, synthesis {:?}, gamma {gamma}",
                        parts.total, parts.cl, parts.syn
                    )));
                }
                s.g.backward(total)?;
                (parts, s.param_grads())
            };
            model.store.zero_grads();
            model.store.accumulate(grads);
            let lr = cfg.lr_at(step, total_steps);
            opt.step(&mut model.store, lr);
            if let Some(id) = model.addons.basis {
                if lr > 0.0 && model.store.entry(id).trainable {
                    renormalize_rows(model.store.value_mut(id));
                }
            }
            report.step_losses.push(parts.total);
            sum_cl += parts.cl;
            sum_syn += parts.syn.unwrap_or(0.0);
            steps += 1;
        }
        sampler_rng = sampler_rng.fork(0x5A);
        let last = epoch + 1 == cfg.epochs;
        let metrics = match val {
            Some(val) if last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) => evaluate(model, val)?,
            _ => Metrics::new(),
        };
        let ego = model.method() == Method::EgoVpa;
        let rec = EpochRecord {
            epoch,
            loss_cl: sum_cl / steps.max(1) as f64,
            loss_syn: ego.then(|| sum_syn / steps.max(1) as f64),
            gamma,
            gram_offdiag_max: if ego { model.basis().map(gram_offdiag_max) } else { None },
            selection: ego.then(|| counts.clone()),
            metrics: metrics.clone(),
        };
        on_epoch(&rec);
        report.epochs.push(rec);
        if last {
            report.metrics = metrics;
        }
    }
    if frozen_checksum(model) != frozen_before {
        return Err(Error::Contract("a frozen parameter changed during training".into()));
    }
    Ok(report)
}

/// SHA-256 over every parameter outside the trainable set.
pub fn frozen_checksum<S: Real>(model: &DualEncoder<S>) -> String {
    model.store.checksum_where(|e| !e.trainable)
}
