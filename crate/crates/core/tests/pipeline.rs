use egovpa::config::RunConfig;
use egovpa::encoders::Checkpoint;
use egovpa::experiment::{adapt, evaluate_split, pretrain};
use egovpa::model::DualEncoder;
use egovpa::prompting::Method;
use egovpa::synthdata::{self, generate, SplitName};

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.items.pretrain = 48;
    cfg.data.items.adapt_train = 24;
    cfg.data.items.adapt_val = 16;
    cfg.data.items.adapt_test = 8;
    cfg.pretrain.epochs = 2;
    cfg.adapt.epochs = 2;
    cfg
}

#[test]
fn adaptation_keeps_the_backbone_frozen() {
    let cfg = small();
    let ds = generate(&cfg.data).unwrap();
    let (pre, _) = pretrain::<f64>(&ds, &cfg).unwrap();
    let reference = pre.backbone_checksum();
    for m in Method::ALL {
        let mut c = cfg.clone();
        c.model.method = m;
        let (model, report) = adapt::<f64>(&ds, &c, &pre.store, 1.0, |_| {}).unwrap();
        let frozen = !matches!(m, Method::Full | Method::Bias);
        assert_eq!(model.backbone_checksum() == reference, frozen, "{m}");
        let map = report.metrics["map"];
        assert!((0.0..=1.0).contains(&map), "{m}: {map}");
    }
}

#[test]
fn saved_artifacts_reproduce_metrics() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&cfg.data).unwrap();
    synthdata::save(&ds, dir.path()).unwrap();
    let loaded = synthdata::load(dir.path()).unwrap();
    assert_eq!(loaded, ds);

    let (pre, _) = pretrain::<f64>(&loaded, &cfg).unwrap();
    let (model, report) = adapt::<f64>(&loaded, &cfg, &pre.store, 1.0, |_| {}).unwrap();

    let path = dir.path().join("model.ckpt");
    let mut ck = Checkpoint::new(serde_json::json!({ "method": "ego-vpa" }));
    ck.push_store(&model.store);
    ck.save(&path).unwrap();
    let mut restored = DualEncoder::<f64>::new(cfg.model.clone(), cfg.seed + 1).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().restore(&mut restored.store).unwrap(), model.store.len());
    let again = evaluate_split(&restored, &loaded, SplitName::AdaptVal).unwrap();
    assert_eq!(again, report.metrics);
}

#[test]
fn single_precision_tracks_double() {
    let cfg = small();
    let ds = generate(&cfg.data).unwrap();
    let (pre64, _) = pretrain::<f64>(&ds, &cfg).unwrap();
    let (pre32, _) = pretrain::<f32>(&ds, &cfg).unwrap();
    let m64 = evaluate_split(&pre64, &ds, SplitName::Pretrain).unwrap();
    let m32 = evaluate_split(&pre32, &ds, SplitName::Pretrain).unwrap();
    for (k, v) in &m64 {
        assert!((v - m32[k]).abs() < 0.05, "{k}: {v} vs {}", m32[k]);
    }
    let (_, report) = adapt::<f32>(&ds, &cfg, &pre32.store, 1.0, |_| {}).unwrap();
    assert!(report.metrics["map"].is_finite());
}

#[test]
fn data_fraction_changes_only_the_training_set() {
    let cfg = small();
    let ds = generate(&cfg.data).unwrap();
    let (pre, _) = pretrain::<f64>(&ds, &cfg).unwrap();
    let mut zs = cfg.clone();
    zs.model.method = Method::ZeroShot;
    let (_, full) = adapt::<f64>(&ds, &zs, &pre.store, 1.0, |_| {}).unwrap();
    let (_, tenth) = adapt::<f64>(&ds, &zs, &pre.store, 0.1, |_| {}).unwrap();
    assert_eq!(full.metrics, tenth.metrics);

    let (_, a) = adapt::<f64>(&ds, &cfg, &pre.store, 0.5, |_| {}).unwrap();
    let (_, b) = adapt::<f64>(&ds, &cfg, &pre.store, 1.0, |_| {}).unwrap();
    assert!(a.step_losses.len() < b.step_losses.len());
}
