use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use egovpa::ablation::{AblationReport, GridSpec};
use egovpa::config::RunConfig;
use egovpa::encoders::{Checkpoint, EncoderConfig};
use egovpa::experiment::{adapt, evaluate_split, pretrain};
use egovpa::model::{DualEncoder, ModelConfig};
use egovpa::prompting::{count_params, formulas, Method, PromptConfig};
use egovpa::synthdata::{self, generate, Dataset, SplitName};
use egovpa::training::{EpochRecord, Metrics};
use egovpa::verify::{self, Suite, VerifyOptions};

use crate::manifest::RunManifest;
use crate::{Failure, Task};

pub const MODEL_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "log.jsonl";
const MODEL_FORMAT: &str = "egovpa-model";

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::default(),
    })
}

pub fn defaults() -> String {
    RunConfig::default().to_toml()
}

pub fn gen(config: Option<&Path>, out: &Path) -> Result<String> {
    let cfg = load_config(config)?;
    let ds = generate(&cfg.data)?;
    synthdata::save(&ds, out).with_context(|| format!("writing dataset to {}", out.display()))?;
    let counts: Vec<_> = ds
        .splits
        .iter()
        .map(|s| json!({ "split": s.name.name(), "items": s.items.len() }))
        .collect();
    Ok(serde_json::to_string_pretty(&json!({
        "out": out,
        "separability": ds.separability,
        "splits": counts,
    }))?)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    synthdata::load(dir).with_context(|| format!("dataset {}", dir.display()))
}

/// Adopts the dataset's generator settings; shape disagreements with the
/// model surface as config errors.
fn bind_dataset(cfg: &mut RunConfig, ds: &Dataset) -> Result<()> {
    cfg.data = ds.config.clone();
    cfg.validate()?;
    Ok(())
}

fn save_model(model: &DualEncoder<f64>, cfg: &RunConfig, stage: &str, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new(json!({
        "format": MODEL_FORMAT,
        "stage": stage,
        "config": cfg,
    }));
    ck.push_store(&model.store);
    ck.save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// Rebuilds the model a checkpoint was written from; `method` overrides the
/// stored one. Pretrained backbones load as zero-shot unless overridden.
pub fn load_model(path: &Path, method: Option<Method>) -> Result<(DualEncoder<f64>, RunConfig)> {
    let ck = Checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))?;
    if ck.header.get("format").and_then(|f| f.as_str()) != Some(MODEL_FORMAT) {
        bail!(egovpa::error::Error::Data(egovpa::error::DataError::Malformed(format!(
            "{} is not a model checkpoint",
            path.display()
        ))));
    }
    let mut cfg: RunConfig = serde_json::from_value(ck.header["config"].clone()).map_err(|e| {
        egovpa::error::Error::Data(egovpa::error::DataError::Malformed(format!(
            "checkpoint config: {e}"
        )))
    })?;
    let pretrained = ck.header.get("stage").and_then(|s| s.as_str()) == Some("pretrain");
    match method {
        Some(m) => cfg.model.method = m,
        None if pretrained => cfg.model.method = Method::ZeroShot,
        None => {}
    }
    let mut model = DualEncoder::<f64>::new(cfg.model.clone(), cfg.seed)?;
    let restored = ck.restore(&mut model.store)?;
    let need = if method.is_some() || pretrained {
        model.store.entries().filter(|(_, e)| e.backbone).count()
    } else {
        model.store.len()
    };
    if restored < need {
        bail!(egovpa::error::Error::Data(egovpa::error::DataError::Malformed(format!(
            "{} holds {restored} of the {need} arrays the model needs",
            path.display()
        ))));
    }
    Ok((model, cfg))
}

fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub method: Option<Method>,
    pub dataset: &'a Path,
    pub out: &'a Path,
    pub backbone: Option<&'a Path>,
    pub pretrain: bool,
    pub fraction: f64,
}

pub fn train(a: TrainArgs<'_>) -> Result<RunManifest> {
    let mut cfg = load_config(a.config)?;
    if let Some(m) = a.method {
        cfg.model.method = m;
    }
    if !(a.fraction > 0.0 && a.fraction <= 1.0) {
        bail!(Failure::Usage(format!(
            "--fraction must lie in (0, 1], got {}",
            a.fraction
        )));
    }
    let ds = load_dataset(a.dataset)?;
    bind_dataset(&mut cfg, &ds)?;
    fs::create_dir_all(a.out).with_context(|| format!("creating {}", a.out.display()))?;

    if a.pretrain {
        if a.backbone.is_some() {
            bail!(Failure::Usage("--pretrain starts from scratch; drop --backbone".into()));
        }
        let (model, report) = pretrain::<f64>(&ds, &cfg)?;
        let metrics = evaluate_split(&model, &ds, SplitName::Pretrain)?;
        let mut manifest = RunManifest::new("train --pretrain", &cfg);
        save_model(&model, &cfg, "pretrain", &a.out.join(MODEL_FILE))?;
        write_log(&a.out.join(LOG_FILE), &report.epochs)?;
        manifest.output("checkpoint", MODEL_FILE);
        manifest.output("log", LOG_FILE);
        manifest.metrics = metrics;
        manifest.write(a.out)?;
        return Ok(manifest);
    }

    let Some(method) = a.method else {
        bail!(Failure::Usage(
            "--method is required unless --pretrain is given".into()
        ));
    };
    let Some(bb_path) = a.backbone.filter(|p| p.exists()) else {
        let hint = a
            .backbone
            .map(|p| format!(" ({} does not exist)", p.display()))
            .unwrap_or_default();
        bail!(Failure::Usage(format!(
            "adapting `{method}` needs a pretrained checkpoint{hint}; run \
             `egovpa train --pretrain --dataset {} --out <dir>` first and pass \
             `--backbone <dir>/{MODEL_FILE}`",
            a.dataset.display()
        )));
    };
    let (backbone, bb_cfg) = load_model(bb_path, Some(Method::Full))?;
    if bb_cfg.model.encoder != cfg.model.encoder {
        bail!(egovpa::error::Error::Config(
            "model.encoder differs from the backbone checkpoint's encoder".into()
        ));
    }
    let mut records = Vec::new();
    let (model, report) = adapt::<f64>(&ds, &cfg, &backbone.store, a.fraction, |r| {
        records.push(r.clone())
    })?;
    let mut manifest = RunManifest::new("train", &cfg);
    if method != Method::ZeroShot {
        save_model(&model, &cfg, "adapt", &a.out.join(MODEL_FILE))?;
        manifest.output("checkpoint", MODEL_FILE);
    } else {
        let stale = a.out.join(MODEL_FILE);
        if stale.exists() {
            fs::remove_file(&stale)?;
        }
    }
    write_log(&a.out.join(LOG_FILE), &records)?;
    manifest.output("log", LOG_FILE);
    manifest.output("backbone", &bb_path.display().to_string());
    manifest.metrics = report.metrics;
    manifest.metrics.insert("fraction".into(), a.fraction);
    manifest.write(a.out)?;
    Ok(manifest)
}

pub fn parse_split(s: &str) -> Result<SplitName, String> {
    SplitName::ALL
        .into_iter()
        .find(|x| x.name() == s || x.name().replace('_', "-") == s)
        .ok_or_else(|| {
            let names: Vec<_> = SplitName::ALL.iter().map(|x| x.name()).collect();
            format!("unknown split `{s}` (one of {})", names.join(", "))
        })
}

pub fn eval(
    checkpoint: &Path,
    dataset: &Path,
    task: Task,
    split: SplitName,
    method: Option<Method>,
) -> Result<Metrics> {
    let (model, mut cfg) = load_model(checkpoint, method)?;
    let ds = load_dataset(dataset)?;
    bind_dataset(&mut cfg, &ds)?;
    let all = evaluate_split(&model, &ds, split)?;
    let keep = |k: &str| match task {
        Task::Classify => matches!(k, "map" | "top1" | "mean_class"),
        Task::Retrieve => k.starts_with("v2t_") || k.starts_with("t2v_"),
    };
    Ok(all.into_iter().filter(|(k, _)| keep(k)).collect())
}

pub fn ablate(grid: Option<&Path>, out: &Path, jobs: usize) -> Result<AblationReport> {
    let spec = match grid {
        Some(p) => GridSpec::load(p).with_context(|| format!("grid {}", p.display()))?,
        None => GridSpec::standard(RunConfig::default()),
    };
    let cells = spec.cells()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let total = cells.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let results = egovpa::ablation::run_cells(&cells, jobs, |r| {
        let n = done.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
        eprintln!(
            "[{n}/{total}] {} {} {}: {} {:.4} ({:.1}s)",
            r.group, r.label, r.method, r.metric, r.score, r.seconds
        );
    })?;
    let report = AblationReport::new(&cells, &results)?;

    let mut manifest = RunManifest::new("ablate", &spec.config);
    let mut lines = String::new();
    for r in &results {
        let mut r = r.clone();
        r.seconds = 0.0;
        writeln!(lines, "{}", serde_json::to_string(&r)?)?;
    }
    let mut files = vec![
        ("results", "results.jsonl".to_string(), lines),
        ("table_csv", "table.csv".into(), report.table_csv()?),
        ("table", "table.txt".into(), report.table_text()),
    ];
    for (axis, text) in report.sweep_csvs()? {
        files.push(("sweep", format!("sweep_{}.csv", axis.name()), text));
    }
    for (role, name, text) in &files {
        fs::write(out.join(name), text).with_context(|| format!("writing {name}"))?;
        let key = if *role == "sweep" {
            name.trim_end_matches(".csv").to_string()
        } else {
            role.to_string()
        };
        manifest.output(&key, name);
    }
    for r in &report.table {
        manifest.metrics.insert(format!("table.{}", r.id), r.score);
    }
    for p in &report.sweeps {
        manifest
            .metrics
            .insert(format!("{}.{}.{}", p.axis, p.method, p.value), p.score);
    }
    manifest.write(out)?;
    Ok(report)
}

pub fn verify(suites: &[Suite], opts: &VerifyOptions) -> Result<bool> {
    let mut ok = true;
    for &suite in suites {
        let report = verify::run(suite, opts)?;
        println!("== {suite} ==");
        for c in &report.checks {
            println!("{c}");
        }
        ok &= report.passed();
    }
    Ok(ok)
}

pub fn params(config: Option<&Path>, methods: &[Method], full_size: bool) -> Result<String> {
    let (enc, prompt) = if full_size {
        (EncoderConfig::full_size(), PromptConfig::full_size())
    } else {
        let cfg = load_config(config)?;
        (cfg.model.encoder, cfg.model.prompt)
    };
    ModelConfig {
        method: Method::EgoVpa,
        encoder: enc.clone(),
        prompt: prompt.clone(),
    }
    .validate()?;
    let methods = if methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        methods.to_vec()
    };
    let mut s = format!(
        "{:<10} {:>14} {:>14} {:>10}  groups\n",
        "method", "trainable", "backbone", "pct"
    );
    for &m in &methods {
        let b = count_params(&enc, &prompt, m);
        let groups: Vec<String> = b.groups.iter().map(|(n, c)| format!("{n}={c}")).collect();
        writeln!(
            s,
            "{:<10} {:>14} {:>14} {:>9.3}%  {}",
            m.to_string(),
            b.trainable,
            b.backbone,
            100.0 * b.fraction,
            groups.join(" ")
        )?;
    }
    let f = formulas(&enc, &prompt);
    let group = |m: Method, names: &[&str]| -> u64 {
        count_params(&enc, &prompt, m)
            .groups
            .iter()
            .filter(|(n, _)| names.contains(&n.as_str()))
            .map(|(_, c)| c)
            .sum()
    };
    writeln!(s, "\n{:<36} {:>14} {:>14}", "closed form", "formula", "counted")?;
    writeln!(
        s,
        "{:<36} {:>14} {:>14}",
        "ego-vpa video: d_f (B + 2 d_vid)",
        f.ego_vpa_video,
        group(Method::EgoVpa, &["basis", "video_adapter"])
    )?;
    writeln!(
        s,
        "{:<36} {:>14} {:>14}",
        "cmm: (16 + 2 M_v T) d_vid^2",
        f.cmm_weights,
        group(Method::VopC, &["cmm_weights"])
    )?;
    Ok(s)
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
