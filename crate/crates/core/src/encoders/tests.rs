use std::sync::Arc;

use super::*;
use crate::numcore::{AttentionMask, ParamStore, Rng, Session, Tensor};

fn small() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        d_txt: 8,
        d_vid: 8,
        d_embed: 6,
        frames: 3,
        patches: 2,
        max_words: 6,
        heads: 2,
        vocab: 20,
        patch_dim: 5,
        mlp_ratio: 2,
    }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn videos(cfg: &EncoderConfig, n: usize, seed: u64) -> VideoBatch<f64> {
    let mut rng = Rng::new(seed);
    VideoBatch::new(random(
        &mut rng,
        &[n, cfg.frames, cfg.patches, cfg.patch_dim],
    ))
    .unwrap()
}

fn captions() -> TextBatch {
    TextBatch::from_words(
        &[
            vec![3, 4, 5],
            vec![7],
            vec![3, 4, 5],
            vec![9, 10, 11, 12, 13, 14],
        ],
        6,
    )
    .unwrap()
}

fn values(s: &Session<f64>, v: crate::numcore::Var) -> Vec<f64> {
    s.g.value(v).data().to_vec()
}

#[test]
fn single_frame_masks_coincide() {
    assert_eq!(
        build_mask(AttentionMode::Intra, 1, 3, 2),
        build_mask(AttentionMode::Inter, 1, 3, 2)
    );
}

#[test]
fn mask_rows_count_visible_tokens() {
    let (t, np, m) = (4, 3, 2);
    for (mode, expect) in [
        (AttentionMode::Intra, 1 + m + np),
        (AttentionMode::Inter, 1 + t * m + np),
    ] {
        let mask = build_mask(mode, t, np, m);
        let first_patch = 1 + t * m;
        for row in &mask[first_patch..] {
            assert_eq!(row.iter().filter(|&&b| b).count(), expect);
        }
        assert!(mask[0].iter().all(|&b| b), "CLS sees everything");
    }
}

#[test]
fn intra_mask_hides_other_frames_prompts() {
    let layout = VideoLayout::new(2, 3, 2, PromptSlots::PerFrame(2));
    let intra = layout.spatial_mask(AttentionMode::Intra);
    let inter = layout.spatial_mask(AttentionMode::Inter);
    for item in 0..2 {
        for f in 0..3 {
            let q = layout.patch_row(item, f, 1);
            for (k, r) in layout.prompt_rows(item).enumerate() {
                assert_eq!(intra.allows(q, r), k / 2 == f);
                assert!(inter.allows(q, r));
            }
            for r in layout.prompt_rows(1 - item) {
                assert!(!inter.allows(q, r), "prompts never cross videos");
            }
        }
    }
}

#[test]
fn intra_attention_is_local_to_frames() {
    let cfg = small();
    let mut rng = Rng::new(5);
    let mut store = ParamStore::<f64>::new();
    let enc = VideoEncoder::new(&mut store, &cfg, &mut rng);
    let layout = VideoLayout::new(1, 3, 2, PromptSlots::PerFrame(2));
    let mask = Arc::new(layout.spatial_mask(AttentionMode::Intra));
    let tokens = random(&mut rng, &[layout.rows(), cfg.d_vid]);
    let run = |x: &Tensor<f64>| {
        let mut s = Session::inference(&store);
        let v = s.g.constant(x.clone());
        let out = enc.layers[0]
            .attn_s
            .apply(&mut s, v, &mask, cfg.heads)
            .unwrap();
        s.g.value(out).clone()
    };
    let base = run(&tokens);
    let mut moved = tokens.clone();
    let frame_g = 2;
    for r in layout.prompt_rows(0).skip(frame_g * 2).take(2) {
        moved.row_mut(r).iter_mut().for_each(|v| *v += 1.0);
    }
    let after = run(&moved);
    for f in 0..2 {
        for p in 0..2 {
            let r = layout.patch_row(0, f, p);
            assert_eq!(base.row(r), after.row(r));
        }
    }
    let r = layout.patch_row(0, frame_g, 0);
    assert_ne!(base.row(r), after.row(r));
}

#[test]
fn temporal_mask_links_same_location_only() {
    let layout = VideoLayout::new(1, 3, 2, PromptSlots::PerFrame(1));
    let m = layout.temporal_mask();
    let q = layout.patch_row(0, 1, 0);
    assert!(m.allows(q, layout.cls_row(0)));
    assert!(m.allows(q, layout.patch_row(0, 0, 0)));
    assert!(m.allows(q, layout.patch_row(0, 2, 0)));
    assert!(!m.allows(q, layout.patch_row(0, 1, 1)));
    for r in layout.prompt_rows(0) {
        assert!(!m.allows(q, r));
        assert_eq!(m.row_count(r), 1);
    }
    assert_eq!(m.row_count(layout.cls_row(0)), 1);
}

#[test]
fn frame_context_averages_patches() {
    let layout = VideoLayout::new(2, 3, 2, PromptSlots::None);
    let mut rng = Rng::new(8);
    let x = random(&mut rng, &[layout.rows(), 4]);
    let store = ParamStore::<f64>::new();
    let mut s = Session::inference(&store);
    let xv = s.g.constant(x.clone());
    let ctx = frame_context(&mut s, xv, &layout).unwrap();
    let ctx = s.g.value(ctx).clone();
    for i in 0..2 {
        for f in 0..3 {
            for c in 0..4 {
                let naive = (x.get(layout.patch_row(i, f, 0), c)
                    + x.get(layout.patch_row(i, f, 1), c))
                    / 2.0;
                assert!((ctx.get(i * 3 + f, c) - naive).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn frame_context_of_equal_patches_is_that_patch() {
    let layout = VideoLayout::new(1, 2, 3, PromptSlots::None);
    let u = [0.5, -1.5, 2.0];
    let x = Tensor::from_rows(&vec![u.to_vec(); layout.rows()]);
    let store = ParamStore::<f64>::new();
    let mut s = Session::inference(&store);
    let xv = s.g.constant(x);
    let ctx = frame_context(&mut s, xv, &layout).unwrap();
    for f in 0..2 {
        for (a, b) in s.g.value(ctx).row(f).iter().zip(u) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

fn text_model(seed: u64) -> (ParamStore<f64>, TextEncoder) {
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(&mut store, &small(), &mut Rng::new(seed));
    (store, enc)
}

#[test]
fn empty_text_prompts_are_bit_identical() {
    let (store, enc) = text_model(1);
    let batch = captions();
    let mut s = Session::inference(&store);
    let plain = enc.encode(&mut s, &batch, &mut NoTextPrompts).unwrap();
    let mut empty = StaticTextPrompts {
        prompts: Tensor::<f64>::zeros(&[0, 8]),
    };
    let mut s2 = Session::inference(&store);
    let with = enc.encode(&mut s2, &batch, &mut empty).unwrap();
    assert_eq!(values(&s, plain.features), values(&s2, with.features));
}

#[test]
fn text_features_are_deterministic_equivariant_and_unit() {
    let (store, enc) = text_model(2);
    let batch = captions();
    let mut s = Session::inference(&store);
    let out = enc.encode(&mut s, &batch, &mut NoTextPrompts).unwrap();
    let f = s.g.value(out.features).clone();
    assert_eq!(f.row(0), f.row(2));
    assert_ne!(f.row(0), f.row(1));
    for r in 0..f.rows() {
        let n: f64 = f.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-10);
    }
    let perm = [3, 1, 0, 2];
    let mut s2 = Session::inference(&store);
    let out2 = enc
        .encode(&mut s2, &batch.select(&perm), &mut NoTextPrompts)
        .unwrap();
    let f2 = s2.g.value(out2.features).clone();
    for (k, &p) in perm.iter().enumerate() {
        assert_eq!(f2.row(k), f.row(p));
    }
}

#[test]
fn text_prompts_change_features() {
    let (store, enc) = text_model(3);
    let batch = captions();
    let mut rng = Rng::new(9);
    let mut p = StaticTextPrompts {
        prompts: random(&mut rng, &[2, 8]),
    };
    let mut s = Session::inference(&store);
    let a = enc.encode(&mut s, &batch, &mut NoTextPrompts).unwrap();
    let b = enc.encode(&mut s, &batch, &mut p).unwrap();
    assert_ne!(values(&s, a.features), values(&s, b.features));
}

#[test]
fn overlong_caption_is_a_config_error() {
    assert!(TextBatch::from_words(&[vec![3; 7]], 6).is_err());
    let (store, enc) = text_model(4);
    let bad = TextBatch {
        ids: vec![vec![1, 3, 3, 3, 3, 3, 3, 3, 3, 2]],
        lengths: vec![8],
    };
    let mut s = Session::inference(&store);
    assert!(matches!(
        enc.encode(&mut s, &bad, &mut NoTextPrompts),
        Err(crate::Error::Config(_))
    ));
}

fn video_model(cfg: &EncoderConfig, seed: u64) -> (ParamStore<f64>, VideoEncoder) {
    let mut store = ParamStore::new();
    let enc = VideoEncoder::new(&mut store, cfg, &mut Rng::new(seed));
    (store, enc)
}

struct Unprompted;

impl VideoPrompter<f64> for Unprompted {
    fn slots(&self) -> PromptSlots {
        PromptSlots::None
    }
    fn mode(&self, _: usize) -> AttentionMode {
        AttentionMode::Inter
    }
    fn needs_context(&self, _: usize) -> bool {
        false
    }
    fn prompts(
        &mut self,
        _: &mut Session<f64>,
        _: usize,
        _: Option<crate::numcore::Var>,
        _: usize,
    ) -> crate::Result<Option<crate::numcore::Var>> {
        Ok(None)
    }
}

#[test]
fn empty_pack_is_bit_identical_to_plain_encoder() {
    let cfg = small();
    let (store, enc) = video_model(&cfg, 1);
    let batch = videos(&cfg, 3, 2);
    let mut s = Session::inference(&store);
    let a = enc.encode(&mut s, &batch, &mut Unprompted).unwrap();
    let b = enc
        .encode(&mut s, &batch, &mut PromptPack::empty(cfg.layers))
        .unwrap();
    assert_eq!(values(&s, a.features), values(&s, b.features));
}

#[test]
fn duplicated_videos_give_duplicated_features() {
    let cfg = small();
    let (store, enc) = video_model(&cfg, 3);
    let batch = videos(&cfg, 2, 4).select(&[0, 1, 0]);
    let mut rng = Rng::new(1);
    let mut pack = PromptPack {
        slots: PromptSlots::PerFrame(2),
        modes: vec![AttentionMode::Intra, AttentionMode::Inter],
        layers: vec![Some(random(&mut rng, &[6, 8])), None],
    };
    let mut s = Session::inference(&store);
    let out = enc.encode(&mut s, &batch, &mut pack).unwrap();
    let f = s.g.value(out.features).clone();
    assert_eq!(f.row(0), f.row(2));
    assert_ne!(f.row(0), f.row(1));
    for r in 0..3 {
        let n: f64 = f.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-10);
    }
}

#[test]
fn prompt_pack_layer_mismatch_is_rejected() {
    let cfg = small();
    let (store, enc) = video_model(&cfg, 3);
    let batch = videos(&cfg, 1, 4);
    let mut pack = PromptPack::<f64> {
        slots: PromptSlots::Shared(1),
        modes: vec![AttentionMode::Inter; 2],
        layers: vec![None, None],
    };
    let mut s = Session::inference(&store);
    assert!(enc.encode(&mut s, &batch, &mut pack).is_err());
}

/// Straightforward per-video forward for `T = 1`: temporal attention lets each
/// patch see CLS and itself, spatial attention is dense.
fn single_frame_reference(
    store: &ParamStore<f64>,
    enc: &VideoEncoder,
    video: &Tensor<f64>,
    np: usize,
    pd: usize,
) -> Vec<f64> {
    let cfg = &enc.cfg;
    let mut s = Session::inference(store);
    let raw = s.g.constant(Tensor::matrix(np, pd, video.data().to_vec()));
    let pe = enc.patch_embed.apply(&mut s, raw).unwrap();
    let ps = s.p(enc.pos_space);
    let pt = s.p(enc.pos_time);
    let pt = s.g.gather_rows(pt, &vec![0; np]).unwrap();
    let pe = s.g.add(pe, ps).unwrap();
    let pe = s.g.add(pe, pt).unwrap();
    let cls = s.p(enc.cls);
    let mut x = s.g.concat_rows(&[cls, pe]).unwrap();
    let n = np + 1;
    let temporal = Arc::new(AttentionMask::from_fn(n, n, |i, j| {
        i == j || (i > 0 && j == 0)
    }));
    let spatial = Arc::new(AttentionMask::full(n, n));
    for layer in &enc.layers {
        for (ln, attn, mask) in [
            (&layer.ln_t, &layer.attn_t, &temporal),
            (&layer.ln_s, &layer.attn_s, &spatial),
        ] {
            let h = ln.apply(&mut s, x).unwrap();
            let h = attn.apply(&mut s, h, mask, cfg.heads).unwrap();
            x = s.g.add(x, h).unwrap();
        }
        let h = layer.ln_m.apply(&mut s, x).unwrap();
        let h = layer.mlp.apply(&mut s, h).unwrap();
        x = s.g.add(x, h).unwrap();
    }
    let c = s.g.gather_rows(x, &[0]).unwrap();
    let c = enc.ln_f.apply(&mut s, c).unwrap();
    let w = s.p(enc.proj);
    let z = s.g.matmul(c, w).unwrap();
    let z = s.g.l2_normalize_rows(z, 1e-12);
    values(&s, z)
}

#[test]
fn single_frame_matches_spatial_only_reference() {
    let cfg = EncoderConfig {
        frames: 1,
        patches: 3,
        ..small()
    };
    let (store, enc) = video_model(&cfg, 7);
    let batch = videos(&cfg, 2, 8);
    let mut s = Session::inference(&store);
    let out = enc.encode(&mut s, &batch, &mut Unprompted).unwrap();
    let f = s.g.value(out.features).clone();
    for i in 0..2 {
        let v = batch.select(&[i]).patches;
        let r = single_frame_reference(&store, &enc, &v, 3, cfg.patch_dim);
        for (a, b) in f.row(i).iter().zip(&r) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn identical_frames_make_temporal_attention_trivial() {
    let cfg = small();
    let (store, enc) = video_model(&cfg, 2);
    let layout = VideoLayout::new(1, 3, 2, PromptSlots::None);
    let mask = Arc::new(layout.temporal_mask());
    let mut rng = Rng::new(3);
    let per_loc = random(&mut rng, &[2, cfg.d_vid]);
    // CLS equals the location-0 patch, so every key of that location is one token
    let mut xs = Tensor::zeros(&[layout.rows(), cfg.d_vid]);
    xs.row_mut(0).copy_from_slice(per_loc.row(0));
    for f in 0..3 {
        for p in 0..2 {
            xs.row_mut(layout.patch_row(0, f, p))
                .copy_from_slice(per_loc.row(p));
        }
    }
    let mut s = Session::inference(&store);
    let xv = s.g.constant(xs.clone());
    let out = enc.layers[0]
        .attn_t
        .apply(&mut s, xv, &mask, cfg.heads)
        .unwrap();
    let single =
        s.g.constant(Tensor::matrix(1, cfg.d_vid, per_loc.row(0).to_vec()));
    let own = Arc::new(AttentionMask::full(1, 1));
    let reference = enc.layers[0]
        .attn_t
        .apply(&mut s, single, &own, cfg.heads)
        .unwrap();
    for f in 0..3 {
        let r = layout.patch_row(0, f, 0);
        for (a, b) in
            s.g.value(out)
                .row(r)
                .iter()
                .zip(s.g.value(reference).row(0))
        {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trips_and_rejects_damage() {
    let cfg = small();
    let (store, _) = video_model(&cfg, 1);
    let mut ck = Checkpoint::new(serde_json::json!({"note": "x"}));
    ck.push_store(&store);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    let mut fresh = ParamStore::<f64>::new();
    VideoEncoder::new(&mut fresh, &cfg, &mut Rng::new(99));
    assert_eq!(back.restore(&mut fresh).unwrap(), store.len());
    assert_eq!(
        fresh.checksum_where(|_| true),
        store.checksum_where(|_| true)
    );

    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(crate::Error::Data(crate::DataError::Truncated(_)))
    ));
    let mut v2 = bytes.clone();
    v2[8] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&v2),
        Err(crate::Error::Data(crate::DataError::VersionMismatch {
            found: 9,
            ..
        }))
    ));
}
