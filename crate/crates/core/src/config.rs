//! Run configuration: one TOML document, optionally layered over others via
//! `include = ["base.toml", ...]` (paths relative to the including file,
//! later files and the including file win key by key).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::prompting::Method;
use crate::synthdata::GeneratorConfig;
use crate::training::{LossConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for model initialisation; training seeds live in their sections.
    pub seed: u64,
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    /// Adaptation learning rates that replace `adapt.lr` for specific methods.
    pub adapt_lr: BTreeMap<Method, f64>,
    pub loss: LossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: GeneratorConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig {
                epochs: 12,
                lr: 3e-3,
                eval_every: 0,
                ..Default::default()
            },
            adapt: TrainConfig {
                epochs: 10,
                lr: 3e-2,
                eval_every: 0,
                ..Default::default()
            },
            adapt_lr: BTreeMap::from([(Method::Full, 1e-3)]),
            loss: LossConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.loss.validate()?;
        for (m, lr) in &self.adapt_lr {
            if !(lr.is_finite() && *lr >= 0.0) {
                return Err(Error::Config(format!("adapt_lr.{m} must be finite and >= 0, got {lr}")));
            }
        }
        let e = &self.model.encoder;
        let d = &self.data;
        for (field, a, b) in [
            ("frames", e.frames, d.frames),
            ("patches", e.patches, d.patches),
            ("patch_dim", e.patch_dim, d.patch_dim),
            ("vocab", e.vocab, d.vocab),
            ("max_words", e.max_words, d.max_words),
        ] {
            if a != b {
                return Err(Error::Config(format!(
                    "model.encoder.{field} ({a}) disagrees with data.{field} ({b})"
                )));
            }
        }
        Ok(())
    }

    /// Layers `doc` over the defaults; keys absent from a table keep the
    /// run defaults rather than the section type's own.
    pub fn from_table(doc: toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(Self::default()).expect("run config serializes");
        merge(&mut base, doc);
        let cfg: Self = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(doc)
    }

    /// Reads `path`, resolving includes.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(resolve(path, &mut Vec::new())?)
    }

    /// Adaptation settings for the configured method.
    pub fn adapt_for(&self, method: Method) -> TrainConfig {
        let mut t = self.adapt.clone();
        if let Some(&lr) = self.adapt_lr.get(&method) {
            t.lr = lr;
        }
        t
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

/// Loads `path` with its includes merged underneath it.
pub fn resolve(path: &Path, stack: &mut Vec<PathBuf>) -> Result<toml::Table> {
    let canon = path.canonicalize().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if stack.contains(&canon) {
        return Err(Error::Config(format!("include cycle through {}", path.display())));
    }
    stack.push(canon);
    let text = std::fs::read_to_string(path)?;
    let mut own: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
    let mut merged = toml::Table::new();
    if let Some(inc) = own.remove("include") {
        let list = inc
            .as_array()
            .ok_or_else(|| Error::Config("include must be an array of paths".into()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in list {
            let rel = p
                .as_str()
                .ok_or_else(|| Error::Config("include entries must be strings".into()))?;
            let sub = resolve(&base.join(rel), stack)?;
            merge(&mut merged, sub);
        }
    }
    merge(&mut merged, own);
    stack.pop();
    Ok(merged)
}

/// Deep-merges `top` into `base`; tables merge key by key, other values replace.
pub fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_and_invalid_fields_are_named() {
        let e = RunConfig::from_toml("[data]\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"));
        let e = RunConfig::from_toml("[loss]\ntau = -1.0\n").unwrap_err();
        assert!(e.to_string().contains("tau"));
        let e = RunConfig::from_toml("[data]\nframes = 3\n").unwrap_err();
        assert!(e.to_string().contains("frames"));
    }

    #[test]
    fn includes_layer_key_by_key() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.toml"), "seed = 4\n[adapt]\nepochs = 3\nlr = 0.5\n").unwrap();
        std::fs::write(
            dir.path().join("run.toml"),
            "include = [\"base.toml\"]\n[adapt]\nlr = 0.25\n[model]\nmethod = \"vpt\"\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&dir.path().join("run.toml")).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.adapt.epochs, 3);
        assert_eq!(cfg.adapt.lr, 0.25);
        assert_eq!(cfg.model.method, crate::prompting::Method::Vpt);
    }

    #[test]
    fn partial_sections_keep_run_defaults() {
        let cfg = RunConfig::from_toml("[adapt]\nbatch_size = 4\n[pretrain]\nepochs = 2\n").unwrap();
        let d = RunConfig::default();
        assert_eq!(cfg.adapt.batch_size, 4);
        assert_eq!(cfg.adapt.lr, d.adapt.lr);
        assert_eq!(cfg.adapt.eval_every, d.adapt.eval_every);
        assert_eq!(cfg.pretrain.lr, d.pretrain.lr);
    }

    #[test]
    fn include_cycles_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.toml"), "include = [\"b.toml\"]\n").unwrap();
        std::fs::write(dir.path().join("b.toml"), "include = [\"a.toml\"]\n").unwrap();
        let e = RunConfig::load(&dir.path().join("a.toml")).unwrap_err();
        assert!(e.to_string().contains("cycle"));
    }
}
