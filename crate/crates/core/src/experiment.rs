//! Pretraining and adaptation runs over a generated dataset.

use crate::config::RunConfig;
use crate::error::Result;
use crate::model::{DualEncoder, ModelConfig};
use crate::numcore::{ParamStore, Real};
use crate::prompting::Method;
use crate::synthdata::{Dataset, SplitName};
use crate::training::{evaluate, train, EpochRecord, Metrics, TrainReport};

/// Full training of a bare dual encoder on the pretraining split.
pub fn pretrain<S: Real>(ds: &Dataset, cfg: &RunConfig) -> Result<(DualEncoder<S>, TrainReport)> {
    let mc = ModelConfig {
        method: Method::Full,
        ..cfg.model.clone()
    };
    let mut model = DualEncoder::new(mc, cfg.seed)?;
    let data = ds.pairs(SplitName::Pretrain)?;
    let report = train(&mut model, &data, None, &cfg.pretrain, &cfg.loss, |_| {})?;
    Ok((model, report))
}

/// Adapts `cfg.model.method` from a pretrained backbone on `fraction` of the
/// adaptation training split and validates on the validation split.
pub fn adapt<S: Real>(
    ds: &Dataset,
    cfg: &RunConfig,
    backbone: &ParamStore<S>,
    fraction: f64,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(DualEncoder<S>, TrainReport)> {
    let mut model = DualEncoder::new(cfg.model.clone(), cfg.seed)?;
    model.adopt_backbone(backbone)?;
    let mut data = ds.pairs(SplitName::AdaptTrain)?;
    if fraction < 1.0 {
        data = data.fraction(fraction, cfg.adapt.seed);
    }
    let val = ds.eval_set(SplitName::AdaptVal)?;
    let tc = cfg.adapt_for(cfg.model.method);
    let report = train(&mut model, &data, Some(&val), &tc, &cfg.loss, on_epoch)?;
    Ok((model, report))
}

pub fn evaluate_split<S: Real>(model: &DualEncoder<S>, ds: &Dataset, split: SplitName) -> Result<Metrics> {
    evaluate(model, &ds.eval_set(split)?)
}
