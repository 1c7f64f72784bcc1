//! Ablation grids: the prompt-generation variant table and one-axis sweeps,
//! each cell an adaptation run from a shared pretrained backbone.
//!
//! A grid file is a run configuration (includes allowed) with two extra keys:
//!
//! ```toml
//! include = ["run.toml"]
//! rows = ["m1", "m2", "m3", "m4", "m5", "m6", "m7"]
//!
//! [[sweeps]]
//! axis = "k_ratio"
//! values = [0.2, 0.4, 0.6, 0.8, 1.0]
//! methods = ["ego-vpa"]
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{merge, resolve, RunConfig};
use crate::error::{Error, Result};
use crate::experiment::{adapt, pretrain};
use crate::numcore::ParamStore;
use crate::prompting::{count_params, Method, OrthPenalty, QueryMode};
use crate::synthdata::{generate, Dataset};
use crate::training::Metrics;

/// A row of the prompt-generation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub id: &'static str,
    pub method: Method,
    pub cross_modal: bool,
    pub orth: bool,
    pub query: QueryMode,
}

impl Variant {
    /// Recurrent context model in place of prompt synthesis; the remaining
    /// flags do not apply.
    pub fn uses_cmm(&self) -> bool {
        self.method.uses_cmm()
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        cfg.model.method = self.method;
        if !self.uses_cmm() {
            cfg.model.prompt.cross_modal = self.cross_modal;
            cfg.model.prompt.query = self.query;
            cfg.loss.orth = if self.orth {
                OrthPenalty::Squared
            } else {
                OrthPenalty::Off
            };
        }
    }
}

pub const VARIANTS: [Variant; 7] = {
    const fn ps(id: &'static str, cross_modal: bool, orth: bool, query: QueryMode) -> Variant {
        Variant {
            id,
            method: Method::EgoVpa,
            cross_modal,
            orth,
            query,
        }
    }
    [
        Variant {
            id: "m1",
            method: Method::VopFc,
            cross_modal: false,
            orth: false,
            query: QueryMode::TopK,
        },
        ps("m2", false, false, QueryMode::Sampled),
        ps("m3", false, true, QueryMode::Sampled),
        ps("m4", true, false, QueryMode::Sampled),
        ps("m5", true, true, QueryMode::Sampled),
        ps("m6", true, false, QueryMode::TopK),
        ps("m7", true, true, QueryMode::TopK),
    ]
};

pub fn variant(id: &str) -> Result<Variant> {
    VARIANTS
        .into_iter()
        .find(|v| v.id == id)
        .ok_or_else(|| Error::Config(format!("unknown table row `{id}` (m1..m7)")))
}

/// Sweepable settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Basis size `B`.
    BasisSize,
    /// Basis prompts per query `k`.
    TopK,
    /// `k / B`, rounded to the nearest integer `k >= 1`.
    KRatio,
    /// Intra/inter-frame attention boundary `K`.
    Boundary,
    /// Frames per video; pretrains a backbone per value.
    Frames,
    /// Share of the adaptation training split.
    DataFraction,
    /// `"top-k"` or `"sampled"`.
    Query,
    /// Orthogonality penalty on (`true`) or off.
    Orth,
    CrossModal,
    Method,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::BasisSize => "basis_size",
            Axis::TopK => "top_k",
            Axis::KRatio => "k_ratio",
            Axis::Boundary => "boundary",
            Axis::Frames => "frames",
            Axis::DataFraction => "data_fraction",
            Axis::Query => "query",
            Axis::Orth => "orth",
            Axis::CrossModal => "cross_modal",
            Axis::Method => "method",
        }
    }

    /// Applies one axis value; returns the training-data fraction.
    fn apply(self, cfg: &mut RunConfig, value: &toml::Value, fraction: &mut f64) -> Result<()> {
        let bad = || {
            Error::Config(format!(
                "sweep axis `{}` cannot take the value {value}",
                self.name()
            ))
        };
        let int = || {
            value
                .as_integer()
                .filter(|v| *v >= 0)
                .map(|v| v as usize)
                .ok_or_else(bad)
        };
        let float = || {
            value
                .as_float()
                .or_else(|| value.as_integer().map(|v| v as f64))
                .ok_or_else(bad)
        };
        let p = &mut cfg.model.prompt;
        match self {
            Axis::BasisSize => p.basis_size = int()?,
            Axis::TopK => p.top_k = int()?,
            Axis::KRatio => {
                let r = float()?;
                p.top_k = ((r * p.basis_size as f64).round() as usize).max(1);
            }
            Axis::Boundary => p.boundary = int()?,
            Axis::Frames => {
                let t = int()?;
                cfg.model.encoder.frames = t;
                cfg.data.frames = t;
            }
            Axis::DataFraction => {
                let f = float()?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(bad());
                }
                *fraction = f;
            }
            Axis::Query => {
                p.query = value
                    .clone()
                    .try_into()
                    .map_err(|_| bad())?;
            }
            Axis::Orth => {
                cfg.loss.orth = match value {
                    toml::Value::Boolean(true) => OrthPenalty::Squared,
                    toml::Value::Boolean(false) => OrthPenalty::Off,
                    v => v.clone().try_into().map_err(|_| bad())?,
                }
            }
            Axis::CrossModal => p.cross_modal = value.as_bool().ok_or_else(bad)?,
            Axis::Method => cfg.model.method = value.as_str().ok_or_else(bad)?.parse()?,
        }
        Ok(())
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::EgoVpa]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: Axis,
    pub values: Vec<toml::Value>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Run-config overrides applied to this sweep only.
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub with: toml::Table,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub config: RunConfig,
    pub rows: Vec<String>,
    pub sweeps: Vec<Sweep>,
}

impl GridSpec {
    /// Every table row and the standard sweeps at toy scale: `B` with `k = 8`,
    /// `k / B` at `B = 10`, the boundary over every depth, frames, and the
    /// training-data fraction for the strongest methods.
    pub fn standard(config: RunConfig) -> Self {
        let ints = |v: &[i64]| v.iter().map(|&x| toml::Value::Integer(x)).collect();
        let floats = |v: &[f64]| v.iter().map(|&x| toml::Value::Float(x)).collect();
        let mut with_k8 = toml::Table::new();
        with_k8.insert("model".into(), toml::toml! { [prompt] top_k = 8 }.into());
        let mut with_b10 = toml::Table::new();
        with_b10.insert("model".into(), toml::toml! { [prompt] basis_size = 10 }.into());
        let layers = config.model.encoder.layers as i64;
        Self {
            rows: VARIANTS.iter().map(|v| v.id.to_string()).collect(),
            sweeps: vec![
                Sweep {
                    axis: Axis::BasisSize,
                    values: ints(&[8, 10, 12, 16]),
                    methods: default_methods(),
                    with: with_k8,
                },
                Sweep {
                    axis: Axis::KRatio,
                    values: floats(&[0.2, 0.4, 0.6, 0.8, 1.0]),
                    methods: default_methods(),
                    with: with_b10,
                },
                Sweep {
                    axis: Axis::Boundary,
                    values: ints(&(0..=layers).collect::<Vec<_>>()),
                    methods: default_methods(),
                    with: toml::Table::new(),
                },
                Sweep {
                    axis: Axis::Frames,
                    values: ints(&[2, 4]),
                    methods: vec![Method::Full, Method::VopFc, Method::EgoVpa],
                    with: toml::Table::new(),
                },
                Sweep {
                    axis: Axis::DataFraction,
                    values: floats(&[0.1, 0.2, 0.5, 1.0]),
                    methods: vec![Method::ZeroShot, Method::Full, Method::VopFc, Method::EgoVpa],
                    with: toml::Table::new(),
                },
            ],
            config,
        }
    }

    pub fn from_table(mut doc: toml::Table) -> Result<Self> {
        let rows = match doc.remove("rows") {
            Some(v) => v
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("rows: {e}")))?,
            None => Vec::new(),
        };
        let sweeps = match doc.remove("sweeps") {
            Some(v) => v
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("sweeps: {e}")))?,
            None => Vec::new(),
        };
        let config = RunConfig::from_table(doc)?;
        let spec = Self {
            config,
            rows,
            sweeps,
        };
        spec.cells()?;
        Ok(spec)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(resolve(path, &mut Vec::new())?)
    }

    /// Expands the grid into runnable cells, table rows first.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mut out = Vec::new();
        for id in &self.rows {
            let v = variant(id)?;
            let mut config = self.config.clone();
            v.apply(&mut config);
            config.validate()?;
            out.push(Cell {
                group: Group::Table,
                label: v.id.to_string(),
                fraction: 1.0,
                config,
            });
        }
        for s in &self.sweeps {
            let base = if s.with.is_empty() {
                self.config.clone()
            } else {
                let mut doc = toml::Table::try_from(&self.config)
                    .map_err(|e| Error::Config(e.to_string()))?;
                merge(&mut doc, s.with.clone());
                doc.try_into()
                    .map_err(|e: toml::de::Error| Error::Config(format!("sweep `{}`: {e}", s.axis)))?
            };
            for &method in &s.methods {
                for value in &s.values {
                    let mut config = base.clone();
                    config.model.method = method;
                    let mut fraction = 1.0;
                    s.axis.apply(&mut config, value, &mut fraction)?;
                    config.validate().map_err(|e| {
                        Error::Config(format!("sweep `{}` at {value}: {e}", s.axis))
                    })?;
                    out.push(Cell {
                        group: Group::Sweep(s.axis),
                        label: value_label(value),
                        fraction,
                        config,
                    });
                }
            }
        }
        Ok(out)
    }
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        v => v.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Table,
    Sweep(Axis),
}

/// One adaptation run of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub group: Group,
    /// Row id or axis value.
    pub label: String,
    pub fraction: f64,
    pub config: RunConfig,
}

impl Cell {
    pub fn method(&self) -> Method {
        self.config.model.method
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    /// `"table"` or the sweep axis.
    pub group: String,
    pub label: String,
    pub method: Method,
    pub fraction: f64,
    /// Headline metric: `map` for multi-label data, `top1` otherwise.
    pub metric: String,
    pub score: f64,
    pub metrics: Metrics,
    pub trainable: u64,
    pub trainable_pct: f64,
    pub seconds: f64,
}

fn headline(cfg: &RunConfig) -> &'static str {
    if cfg.data.multilabel {
        "map"
    } else {
        "top1"
    }
}

/// Everything a cell's pretrained backbone depends on.
fn backbone_key(cfg: &RunConfig) -> String {
    let parts = (
        cfg.seed,
        &cfg.data,
        &cfg.model.encoder,
        &cfg.pretrain,
        cfg.loss.tau,
    );
    serde_json::to_string(&parts).expect("configs serialize")
}

/// Runs every cell, `jobs` at a time. Datasets and pretrained backbones are
/// built once per distinct configuration. `on_cell` sees each result as it
/// completes; the returned results follow cell order.
pub fn run_cells(
    cells: &[Cell],
    jobs: usize,
    on_cell: impl Fn(&CellResult) + Sync,
) -> Result<Vec<CellResult>> {
    let mut keys: Vec<String> = Vec::new();
    let mut owners: Vec<usize> = Vec::new();
    let mut key_of = Vec::with_capacity(cells.len());
    for (i, c) in cells.iter().enumerate() {
        let k = backbone_key(&c.config);
        let at = match keys.iter().position(|x| *x == k) {
            Some(at) => at,
            None => {
                keys.push(k);
                owners.push(i);
                keys.len() - 1
            }
        };
        key_of.push(at);
    }

    let prepared: Vec<(Dataset, ParamStore<f64>)> = parallel(owners.len(), jobs, |j| {
        let cfg = &cells[owners[j]].config;
        let ds = generate(&cfg.data)?;
        let (model, _) = pretrain::<f64>(&ds, cfg)?;
        Ok((ds, model.store))
    })?;

    parallel(cells.len(), jobs, |i| {
        let cell = &cells[i];
        let (ds, store) = &prepared[key_of[i]];
        let start = Instant::now();
        let (model, report) = adapt::<f64>(ds, &cell.config, store, cell.fraction, |_| {})?;
        let counts = count_params(
            &cell.config.model.encoder,
            &cell.config.model.prompt,
            cell.method(),
        );
        let metric = headline(&cell.config);
        let result = CellResult {
            group: match cell.group {
                Group::Table => "table".into(),
                Group::Sweep(a) => a.name().into(),
            },
            label: cell.label.clone(),
            method: cell.method(),
            fraction: cell.fraction,
            metric: metric.into(),
            score: report.metrics.get(metric).copied().unwrap_or(f64::NAN),
            metrics: report.metrics,
            trainable: model.trainable_count() as u64,
            trainable_pct: 100.0 * counts.fraction,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_cell(&result);
        Ok(result)
    })
}

/// `f(0..n)` on up to `jobs` threads; results in index order, first error wins.
fn parallel<T: Send>(
    n: usize,
    jobs: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                let failed = r.is_err();
                slots.lock().expect("no worker panicked")[i] = Some(r);
                if failed {
                    next.store(n, Ordering::SeqCst);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(n);
    for r in slots.into_inner().expect("no worker panicked") {
        match r {
            Some(r) => out.push(r?),
            None => {
                return Err(Error::Contract(
                    "grid stopped after an earlier cell failed".into(),
                ))
            }
        }
    }
    Ok(out)
}

/// The table and sweep records of a finished grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub table: Vec<TableRow>,
    pub sweeps: Vec<SweepPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub id: String,
    /// `"CMM"` or `"PS"` (prompt synthesis).
    pub prompt_generation: String,
    /// `None` where the flag does not apply.
    pub cross_modality: Option<bool>,
    pub orthogonality: Option<bool>,
    pub query: Option<QueryMode>,
    pub metric: String,
    pub score: f64,
    pub trainable_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: Axis,
    pub value: String,
    pub method: Method,
    pub metric: String,
    pub score: f64,
    pub t2v_map: f64,
    pub v2t_map: f64,
    pub trainable_pct: f64,
}

impl AblationReport {
    pub fn new(cells: &[Cell], results: &[CellResult]) -> Result<Self> {
        let mut table = Vec::new();
        let mut sweeps = Vec::new();
        for (c, r) in cells.iter().zip(results) {
            match c.group {
                Group::Table => {
                    let v = variant(&c.label)?;
                    let ps = !v.uses_cmm();
                    table.push(TableRow {
                        id: v.id.into(),
                        prompt_generation: if ps { "PS" } else { "CMM" }.into(),
                        cross_modality: ps.then_some(v.cross_modal),
                        orthogonality: ps.then_some(v.orth),
                        query: ps.then_some(v.query),
                        metric: r.metric.clone(),
                        score: r.score,
                        trainable_pct: r.trainable_pct,
                    });
                }
                Group::Sweep(axis) => sweeps.push(SweepPoint {
                    axis,
                    value: r.label.clone(),
                    method: r.method,
                    metric: r.metric.clone(),
                    score: r.score,
                    t2v_map: r.metrics.get("t2v_map").copied().unwrap_or(f64::NAN),
                    v2t_map: r.metrics.get("v2t_map").copied().unwrap_or(f64::NAN),
                    trainable_pct: r.trainable_pct,
                }),
            }
        }
        Ok(Self { table, sweeps })
    }

    /// Fixed-width text rendering of the variant table.
    pub fn table_text(&self) -> String {
        let flag = |f: Option<bool>| match f {
            Some(true) => "yes",
            Some(false) => "no",
            None => "n/a",
        };
        let mut s = format!(
            "{:<4} {:<10} {:<12} {:<13} {:<8} {:>8} {:>10}\n",
            "row", "generation", "cross-modal", "orthogonality", "query", "metric", "params(%)"
        );
        for r in &self.table {
            let query = match r.query {
                Some(QueryMode::Sampled) => "sampled",
                Some(QueryMode::TopK) => "top-k",
                None => "n/a",
            };
            s += &format!(
                "{:<4} {:<10} {:<12} {:<13} {:<8} {:>8.4} {:>10.3}\n",
                r.id,
                r.prompt_generation,
                flag(r.cross_modality),
                flag(r.orthogonality),
                query,
                r.score,
                r.trainable_pct
            );
        }
        s
    }

    pub fn table_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "id",
            "prompt_generation",
            "cross_modality",
            "orthogonality",
            "query",
            "metric",
            "score",
            "trainable_pct",
        ])
        .map_err(csv_err)?;
        let opt = |f: Option<bool>| f.map_or(String::new(), |b| b.to_string());
        for r in &self.table {
            let query = r
                .query
                .map_or(String::new(), |q| serde_json::to_value(q).expect("serializes").as_str().unwrap_or_default().to_string());
            w.write_record([
                r.id.clone(),
                r.prompt_generation.clone(),
                opt(r.cross_modality),
                opt(r.orthogonality),
                query,
                r.metric.clone(),
                r.score.to_string(),
                r.trainable_pct.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }

    /// Sweep records grouped per axis, one CSV document each.
    pub fn sweep_csvs(&self) -> Result<BTreeMap<Axis, String>> {
        let mut by_axis: BTreeMap<Axis, Vec<&SweepPoint>> = BTreeMap::new();
        for p in &self.sweeps {
            by_axis.entry(p.axis).or_default().push(p);
        }
        let mut out = BTreeMap::new();
        for (axis, points) in by_axis {
            let mut w = csv::Writer::from_writer(Vec::new());
            for p in points {
                w.serialize(p).map_err(csv_err)?;
            }
            out.insert(axis, finish_csv(w)?);
        }
        Ok(out)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Contract(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Contract(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_flags_follow_the_table_layout() {
        let flags: Vec<_> = VARIANTS[1..]
            .iter()
            .map(|v| (v.cross_modal, v.orth, v.query))
            .collect();
        use QueryMode::*;
        assert_eq!(
            flags,
            vec![
                (false, false, Sampled),
                (false, true, Sampled),
                (true, false, Sampled),
                (true, true, Sampled),
                (true, false, TopK),
                (true, true, TopK),
            ]
        );
        assert!(VARIANTS[0].uses_cmm());
        assert!(variant("m9").is_err());
    }

    #[test]
    fn grid_files_expand_to_cells() {
        let spec = GridSpec::from_toml(
            r#"
            rows = ["m2", "m5"]
            [adapt]
            epochs = 2
            [[sweeps]]
            axis = "k_ratio"
            values = [0.5, 0.8]
            with = { model = { prompt = { basis_size = 10 } } }
            [[sweeps]]
            axis = "data_fraction"
            values = [0.1, 1.0]
            methods = ["vpt", "ego-vpa"]
            "#,
        )
        .unwrap();
        let cells = spec.cells().unwrap();
        assert_eq!(cells.len(), 2 + 2 + 4);
        assert_eq!(cells[0].config.loss.orth, OrthPenalty::Off);
        assert!(!cells[0].config.model.prompt.cross_modal);
        assert_eq!(cells[1].config.loss.orth, OrthPenalty::Squared);
        assert_eq!(cells[3].config.model.prompt.top_k, 8);
        assert_eq!(cells[3].label, "0.8");
        assert!(cells.iter().all(|c| c.config.adapt.epochs == 2));
        assert_eq!(cells[4].method(), Method::Vpt);
        assert_eq!(cells[4].fraction, 0.1);
    }

    #[test]
    fn bad_axis_values_are_rejected() {
        for doc in [
            "[[sweeps]]\naxis = \"boundary\"\nvalues = [9]\n",
            "[[sweeps]]\naxis = \"data_fraction\"\nvalues = [0.0]\n",
            "[[sweeps]]\naxis = \"query\"\nvalues = [\"greedy\"]\n",
            "[[sweeps]]\naxis = \"depth\"\nvalues = [1]\n",
            "rows = [\"m8\"]\n",
        ] {
            assert!(GridSpec::from_toml(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn standard_grid_covers_every_axis_point() {
        let spec = GridSpec::standard(RunConfig::default());
        let cells = spec.cells().unwrap();
        assert_eq!(cells.iter().filter(|c| c.group == Group::Table).count(), 7);
        let ks: Vec<_> = cells
            .iter()
            .filter(|c| c.group == Group::Sweep(Axis::KRatio))
            .map(|c| (c.label.clone(), c.config.model.prompt.top_k))
            .collect();
        assert!(ks.contains(&("0.8".to_string(), 8)));
        let fractions: Vec<f64> = cells
            .iter()
            .filter(|c| c.group == Group::Sweep(Axis::DataFraction) && c.method() == Method::EgoVpa)
            .map(|c| c.fraction)
            .collect();
        assert_eq!(fractions, vec![0.1, 0.2, 0.5, 1.0]);
    }

    #[test]
    fn parallel_keeps_order_and_reports_errors() {
        let v = parallel(20, 4, |i| Ok(i * i)).unwrap();
        assert_eq!(v, (0..20).map(|i| i * i).collect::<Vec<_>>());
        let e = parallel(5, 2, |i| {
            if i == 3 {
                Err(Error::Numeric("boom".into()))
            } else {
                Ok(i)
            }
        });
        assert!(e.is_err());
    }
}
