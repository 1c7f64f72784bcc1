use std::collections::HashSet;
use std::fs;

use super::*;
use crate::error::{DataError, Error};

fn small() -> GeneratorConfig {
    GeneratorConfig {
        items: SplitSizes {
            pretrain: 24,
            adapt_train: 12,
            adapt_val: 8,
            adapt_test: 8,
        },
        ..Default::default()
    }
}

fn files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn same_seed_same_dataset() {
    assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
    let other = GeneratorConfig { seed: 1, ..small() };
    assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
}

#[test]
fn clean_concept_components_repeat_across_items() {
    let cfg = GeneratorConfig {
        noise_std: 0.0,
        domain_shift: 0.0,
        multilabel: false,
        ..small()
    };
    let ds = generate(&cfg).unwrap();
    let d = cfg.patch_dim;
    let items = &ds.split(SplitName::Pretrain).items;
    let c = items[0].labels[0];
    let twin = items[1..].iter().find(|i| i.labels == vec![c]).expect("a repeated concept");
    for t in 0..cfg.frames {
        // the most common patch of a frame is the concept patch
        let frame = |it: &Item| -> Vec<Vec<f32>> {
            (0..cfg.patches)
                .map(|p| it.patches[(t * cfg.patches + p) * d..][..d].to_vec())
                .collect()
        };
        let a = frame(&items[0]);
        let b = frame(twin);
        let concept_a = a.iter().find(|x| a.iter().filter(|y| y == x).count() > 1).unwrap();
        assert!(b.contains(concept_a));
    }
}

#[test]
fn splits_are_disjoint_and_sized() {
    let ds = generate(&small()).unwrap();
    let mut ids = HashSet::new();
    for s in &ds.splits {
        assert_eq!(s.items.len(), small().items.get(s.name));
        for it in &s.items {
            assert!(ids.insert(it.id));
            assert_eq!(it.patches.len(), small().item_floats());
            assert!((1..=3).contains(&it.labels.len()));
            assert_eq!(it.words, caption(&it.labels));
        }
    }
}

#[test]
fn centroid_classifier_clears_the_floor() {
    let ds = generate(&small()).unwrap();
    assert!(ds.separability >= 0.95, "{}", ds.separability);
}

#[test]
fn shift_only_touches_adaptation_splits() {
    let base = generate(&small()).unwrap();
    let unshifted = generate(&GeneratorConfig {
        domain_shift: 0.0,
        ..small()
    })
    .unwrap();
    assert_eq!(base.split(SplitName::Pretrain), unshifted.split(SplitName::Pretrain));
    assert_ne!(base.split(SplitName::AdaptTrain), unshifted.split(SplitName::AdaptTrain));
}

#[test]
fn infeasible_label_count_is_rejected() {
    let cfg = GeneratorConfig {
        n_concepts: 2,
        labels_per_item: 3,
        ..small()
    };
    let e = generate(&cfg).unwrap_err();
    assert!(e.to_string().contains("labels_per_item"));
}

#[test]
fn save_load_save_is_byte_identical() {
    let ds = generate(&small()).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save(&ds, a.path()).unwrap();
    let back = load(a.path()).unwrap();
    assert_eq!(back, ds);
    save(&back, b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    let names: Vec<String> = files(a.path()).into_iter().map(|f| f.0).collect();
    assert_eq!(
        names,
        ["adapt_test.jsonl", "adapt_train.jsonl", "adapt_val.jsonl", "features.bin", "manifest.json", "pretrain.jsonl"]
    );
}

#[test]
fn empty_dataset_round_trips() {
    let cfg = GeneratorConfig {
        items: SplitSizes {
            pretrain: 0,
            adapt_train: 0,
            adapt_val: 0,
            adapt_test: 0,
        },
        ..small()
    };
    let ds = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save(&ds, dir.path()).unwrap();
    assert_eq!(load(dir.path()).unwrap(), ds);
}

fn data_code(e: Error) -> u8 {
    match e {
        Error::Data(d) => d.code(),
        other => panic!("expected a data error, got {other}"),
    }
}

#[test]
fn corruption_yields_distinct_errors() {
    let ds = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save(&ds, dir.path()).unwrap();
    let feat = dir.path().join("features.bin");
    let good = fs::read(&feat).unwrap();

    let mut flipped = good.clone();
    flipped[100] ^= 0x01;
    fs::write(&feat, &flipped).unwrap();
    let e = load(dir.path()).unwrap_err();
    assert!(matches!(e, Error::Data(DataError::Checksum { .. })));
    let checksum = data_code(e);

    fs::write(&feat, &good).unwrap();
    let manifest = dir.path().join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("\"version\": 1", "\"version\": 7")).unwrap();
    let version = data_code(load(dir.path()).unwrap_err());
    fs::write(&manifest, &text).unwrap();

    // truncate and re-sign, so only the length check can object
    let short = &good[..good.len() - 8];
    fs::write(&feat, short).unwrap();
    let new_sum = hex::encode(<sha2::Sha256 as sha2::Digest>::digest(short));
    let old_sum = hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&good));
    fs::write(&manifest, text.replace(&old_sum, &new_sum)).unwrap();
    let truncated = data_code(load(dir.path()).unwrap_err());

    let codes: HashSet<u8> = [checksum, version, truncated].into();
    assert_eq!(codes.len(), 3);
}

#[test]
fn pairs_match_items() {
    let ds = generate(&small()).unwrap();
    let p = ds.pairs::<f64>(SplitName::AdaptVal).unwrap();
    let items = &ds.split(SplitName::AdaptVal).items;
    assert_eq!(p.len(), items.len());
    assert_eq!(p.labels[3], items[3].labels);
    let e = ds.eval_set::<f32>(SplitName::AdaptTest).unwrap();
    assert_eq!(e.class_texts.len(), 8);
}
