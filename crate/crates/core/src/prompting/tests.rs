use proptest::prelude::{prop_assert, proptest};

use super::*;
use crate::encoders::EncoderConfig;
use crate::numcore::{Graph, ParamStore, Rng, Session, Tensor};
use crate::oracle;

fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn eval(g: &Graph<f64>, v: crate::numcore::Var) -> f64 {
    g.value(v).item()
}

#[test]
fn project_with_identity_returns_unit_input() {
    let mut rng = Rng::new(1);
    let z = unit(&mut rng, 5);
    let mut g = Graph::new();
    let zv = g.constant(Tensor::row_vector(z.clone()));
    let h = g.constant(Tensor::identity(5));
    let p = project(&mut g, zv, h).unwrap();
    for (a, b) in g.value(p).data().iter().zip(&z) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn project_matches_naive_normalized_product() {
    let mut rng = Rng::new(2);
    let z: Vec<f64> = (0..6).map(|_| 3.0 * rng.normal()).collect();
    let h: Vec<f64> = (0..6 * 4).map(|_| rng.normal()).collect();
    let mut g = Graph::new();
    let zv = g.constant(Tensor::row_vector(z.clone()));
    let hv = g.constant(Tensor::matrix(6, 4, h.clone()));
    let p = project(&mut g, zv, hv).unwrap();
    let y = oracle::naive_matmul(&z, &h, 1, 6, 4);
    let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let out = g.value(p).data();
    assert!((out.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);
    for (a, b) in out.iter().zip(&y) {
        assert!((a - b / n).abs() <= 1e-12);
    }
}

#[test]
fn canonical_basis_selects_the_matching_axis() {
    let f = Tensor::<f64>::identity(6);
    let mut hz = vec![0.0; 6];
    hz[3] = 1.0;
    let sel = select_topk(&hz, &f, 1);
    assert_eq!(sel.indices, vec![3]);
    assert_eq!(sel.alpha, vec![1.0]);
    let a = sel.one_hot(6);
    assert_eq!(a.shape(), &[6, 1]);
    assert_eq!(a.get(3, 0), 1.0);
}

#[test]
fn full_selection_reconstructs_vectors_in_the_span() {
    let mut rng = Rng::new(3);
    let f: Tensor<f64> = orthonormal_rows(4, 7, &mut rng).unwrap();
    let coef = [0.3, -0.5, 0.1, 0.8];
    let mut hz = vec![0.0; 7];
    for (c, r) in coef.iter().zip(0..4) {
        hz.iter_mut().zip(f.row(r)).for_each(|(h, v)| *h += c * v);
    }
    let sel = select_topk(&hz, &f, 4);
    let a2: f64 = sel.alpha.iter().map(|a| a * a).sum();
    let h2: f64 = hz.iter().map(|h| h * h).sum();
    assert!((h2 - a2).abs() <= 1e-12);
    let mut g = Graph::new();
    let hv = g.constant(Tensor::row_vector(hz));
    let fv = g.constant(f);
    let r = recon_loss(&mut g, hv, fv, &sel.indices).unwrap();
    assert!(eval(&g, r) <= 1e-9);
}

#[test]
fn topk_matches_exhaustive_subset_search() {
    let mut rng = Rng::new(4);
    for trial in 0..60 {
        let b = 2 + trial % 7;
        let d = b + 2;
        let f: Tensor<f64> = orthonormal_rows(b, d, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..b).map(|i| f.row(i).to_vec()).collect();
        let hz = unit(&mut rng, d);
        for k in 1..=b {
            let sel = select_topk(&hz, &f, k);
            let (best, _) = oracle::best_subset(&rows, &hz, k);
            let mut got = sel.indices.clone();
            got.sort_unstable();
            assert_eq!(got, best, "b={b} k={k}");
        }
    }
}

#[test]
fn ties_go_to_the_lower_index() {
    let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let sel = select_topk(&[0.5, 0.5], &f, 1);
    assert_eq!(sel.indices, vec![0]);
}

#[test]
fn sharpened_similarity_sampling_recovers_topk() {
    let mut rng = Rng::new(5);
    let f: Tensor<f64> = orthonormal_rows(6, 8, &mut rng).unwrap();
    let hz = unit(&mut rng, 8);
    let top = select_topk(&hz, &f, 2);
    let mut sampler = SamplerState::new(1.0, 1e-3, Rng::new(6));
    let counts = vec![0; 6];
    let mut misses = 0;
    for _ in 0..10_000 {
        let s = select_sampled(&hz, &f, 2, &counts, &mut sampler);
        if s.indices != top.indices {
            misses += 1;
        }
    }
    assert!(misses < 100, "{misses} draws differed from top-k");
}

#[test]
fn inverse_frequency_sampling_is_uniform_for_equal_counts() {
    let mut rng = Rng::new(7);
    let f: Tensor<f64> = orthonormal_rows(5, 8, &mut rng).unwrap();
    let hz = unit(&mut rng, 8);
    let mut sampler = SamplerState::new(0.0, 0.1, Rng::new(8));
    let counts = vec![3; 5];
    let mut hist = [0usize; 5];
    let n = 100_000;
    for _ in 0..n {
        hist[select_sampled(&hz, &f, 1, &counts, &mut sampler).indices[0]] += 1;
    }
    let tv: f64 = hist
        .iter()
        .map(|&c| (c as f64 / n as f64 - 0.2).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.05, "total variation {tv}");
}

#[test]
fn frequently_used_rows_are_drawn_least() {
    let mut rng = Rng::new(9);
    let f: Tensor<f64> = orthonormal_rows(4, 6, &mut rng).unwrap();
    let hz = unit(&mut rng, 6);
    let mut sampler = SamplerState::new(0.0, 0.1, Rng::new(10));
    let counts = vec![9, 0, 0, 0];
    let mut hist = [0usize; 4];
    for _ in 0..100_000 {
        hist[select_sampled(&hz, &f, 1, &counts, &mut sampler).indices[0]] += 1;
    }
    assert!(hist[1..].iter().all(|&c| c > hist[0]), "{hist:?}");
}

#[test]
fn sampling_counts_selected_rows() {
    let mut rng = Rng::new(11);
    let mut basis = PromptBasis::<f64>::init(5, 8, &mut rng).unwrap();
    let hz = unit(&mut rng, 8);
    let mut sampler = SamplerState::new(0.5, 0.1, Rng::new(1));
    let sel = basis.select_sampled(&hz, 3, &mut sampler);
    assert_eq!(basis.counts.iter().sum::<u64>(), 3);
    for &i in &sel.indices {
        assert_eq!(basis.counts[i], 1);
    }
    basis.select_topk(&hz, 3, false);
    assert_eq!(basis.counts.iter().sum::<u64>(), 3);
    basis.select_topk(&hz, 3, true);
    assert_eq!(basis.counts.iter().sum::<u64>(), 6);
    basis.reset_counts();
    assert!(basis.counts.iter().all(|&c| c == 0));
}

#[test]
fn synthesize_with_identity_decoder_copies_rows() {
    let mut rng = Rng::new(12);
    let f: Tensor<f64> = orthonormal_rows(6, 6, &mut rng).unwrap();
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let id = g.constant(Tensor::identity(6));
    let p = synthesize(&mut g, fv, id, &[2, 5]).unwrap();
    assert_eq!(g.value(p).row(0), f.row(2));
    assert_eq!(g.value(p).row(1), f.row(5));
}

#[test]
fn synthesize_matches_naive_decoder() {
    let mut rng = Rng::new(13);
    let f: Tensor<f64> = orthonormal_rows(5, 6, &mut rng).unwrap();
    let dec: Vec<f64> = (0..6 * 9).map(|_| rng.normal()).collect();
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let dv = g.constant(Tensor::matrix(6, 9, dec.clone()));
    let idx = [4, 0, 3];
    let p = synthesize(&mut g, fv, dv, &idx).unwrap();
    assert_eq!(g.value(p).shape(), &[3, 9]);
    for (r, &i) in idx.iter().enumerate() {
        let y = oracle::naive_matmul(f.row(i), &dec, 1, 6, 9);
        for (a, b) in g.value(p).row(r).iter().zip(&y) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn recon_identity_and_degenerate_selection() {
    let mut rng = Rng::new(14);
    for _ in 0..50 {
        let f: Tensor<f64> = orthonormal_rows(6, 9, &mut rng).unwrap();
        let hz = unit(&mut rng, 9);
        let sel = select_topk(&hz, &f, 3);
        let mut g = Graph::new();
        let hv = g.constant(Tensor::row_vector(hz.clone()));
        let fv = g.constant(f.clone());
        let r = recon_loss(&mut g, hv, fv, &sel.indices).unwrap();
        let a2: f64 = sel.alpha.iter().map(|a| a * a).sum();
        assert!((eval(&g, r).powi(2) + a2 - 1.0).abs() <= 1e-9);
        let r0 = recon_loss(&mut g, hv, fv, &[]).unwrap();
        assert!((eval(&g, r0) - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn orth_penalty_examples() {
    let mut rng = Rng::new(15);
    let f: Tensor<f64> = orthonormal_rows(5, 7, &mut rng).unwrap();
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    for v in [OrthPenalty::Squared, OrthPenalty::Signed] {
        let p = orth_penalty(&mut g, fv, v).unwrap().unwrap();
        assert!(eval(&g, p).abs() <= 1e-12);
    }
    assert!(orth_penalty(&mut g, fv, OrthPenalty::Off)
        .unwrap()
        .is_none());

    let u = unit(&mut rng, 4);
    let dup = g.constant(Tensor::from_rows(&[u.clone(), u]));
    let p = orth_penalty(&mut g, dup, OrthPenalty::Squared)
        .unwrap()
        .unwrap();
    assert!((eval(&g, p) - 2.0).abs() <= 1e-12);

    let rnd: Vec<f64> = (0..4 * 6).map(|_| rng.normal()).collect();
    let rv = g.constant(Tensor::matrix(4, 6, rnd.clone()));
    let p = orth_penalty(&mut g, rv, OrthPenalty::Squared)
        .unwrap()
        .unwrap();
    let gram = oracle::naive_matmul(
        &rnd,
        &Tensor::matrix(4, 6, rnd.clone()).transpose().into_data(),
        4,
        6,
        4,
    );
    let frob: f64 = (0..4)
        .flat_map(|i| (0..4).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .map(|(i, j)| gram[i * 4 + j].powi(2))
        .sum();
    assert!((eval(&g, p) - frob).abs() <= 1e-12);
}

/// Per-item `sum_f r_f + r_t + orth` recomputed one query at a time.
fn naive_item_loss(f: &Tensor<f64>, frames: &[Vec<f64>], text: &[f64], k: usize) -> f64 {
    let rows: Vec<Vec<f64>> = (0..f.rows()).map(|i| f.row(i).to_vec()).collect();
    let resid = |h: &[f64]| {
        let sel = select_topk(h, f, k);
        let r: Vec<&[f64]> = sel.indices.iter().map(|&i| rows[i].as_slice()).collect();
        oracle::lstsq_residual(&r, h)
    };
    let mut orth = 0.0;
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            if i != j {
                let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                orth += d * d;
            }
        }
    }
    frames.iter().map(|h| resid(h)).sum::<f64>() + resid(text) + orth
}

#[test]
fn syn_loss_matches_naive_reaggregation() {
    let mut rng = Rng::new(16);
    let (t, n, k, d) = (3, 3, 2, 6);
    let f: Tensor<f64> = orthonormal_rows(5, d, &mut rng).unwrap();
    let frames: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| (0..t).map(|_| unit(&mut rng, d)).collect())
        .collect();
    let texts: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
    let build = |items: &[usize]| {
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let vh: Vec<Vec<f64>> = items.iter().flat_map(|&i| frames[i].clone()).collect();
        let vsel: Vec<Vec<usize>> = vh.iter().map(|h| select_topk(h, &f, k).indices).collect();
        let vv = g.constant(Tensor::from_rows(&vh));
        let vl = recon_losses(&mut g, vv, fv, &vsel).unwrap();
        let th: Vec<Vec<f64>> = items.iter().map(|&i| texts[i].clone()).collect();
        let tsel: Vec<Vec<usize>> = th.iter().map(|h| select_topk(h, &f, k).indices).collect();
        let tv = g.constant(Tensor::from_rows(&th));
        let tl = recon_losses(&mut g, tv, fv, &tsel).unwrap();
        let o = orth_penalty(&mut g, fv, OrthPenalty::Squared).unwrap();
        let l = syn_loss(&mut g, &[vl], &[tl], o, items.len()).unwrap();
        eval(&g, l)
    };
    let naive: f64 = (0..n)
        .map(|i| naive_item_loss(&f, &frames[i], &texts[i], k))
        .sum::<f64>()
        / n as f64;
    assert!((build(&[0, 1, 2]) - naive).abs() <= 1e-10);
    assert!((build(&[1]) - naive_item_loss(&f, &frames[1], &texts[1], k)).abs() <= 1e-10);
}

#[test]
fn syn_loss_vanishes_for_spanned_queries() {
    let mut rng = Rng::new(17);
    let f: Tensor<f64> = orthonormal_rows(4, 6, &mut rng).unwrap();
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let hs: Vec<Vec<f64>> = (0..4).map(|i| f.row(i).to_vec()).collect();
    let sels: Vec<Vec<usize>> = hs.iter().map(|h| select_topk(h, &f, 2).indices).collect();
    let hv = g.constant(Tensor::from_rows(&hs));
    let v = recon_losses(&mut g, hv, fv, &sels).unwrap();
    let o = orth_penalty(&mut g, fv, OrthPenalty::Squared).unwrap();
    let l = syn_loss(&mut g, &[v], &[], o, 2).unwrap();
    assert!(eval(&g, l).abs() <= 1e-8);
}

#[test]
fn selection_is_scale_covariant() {
    let mut rng = Rng::new(18);
    let f: Tensor<f64> = orthonormal_rows(7, 9, &mut rng).unwrap();
    let hz = unit(&mut rng, 9);
    let base = select_topk(&hz, &f, 3);
    let scaled: Vec<f64> = hz.iter().map(|v| v * 2.5).collect();
    let s = select_topk(&scaled, &f, 3);
    assert_eq!(s.indices, base.indices);
    for (a, b) in s.alpha.iter().zip(&base.alpha) {
        assert!((a - 2.5 * b).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn mixture_is_a_distribution(gamma in 0.0f64..=1.0, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let dots: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let counts: Vec<u64> = (0..10).map(|_| rng.below(20) as u64).collect();
        let p = mixture_distribution(&dots, &counts, gamma, 0.1);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn cmm_single_frame_shape() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(19);
    let cmm = Cmm::new(&mut store, &mut rng, 6, 1, 3);
    let mut s = Session::new(&store);
    let ctx = s.g.constant(Tensor::matrix(
        2,
        6,
        (0..12).map(|_| rng.normal()).collect(),
    ));
    let p = cmm.generate(&mut s, ctx).unwrap();
    assert_eq!(s.g.value(p).shape(), &[2 * 3, 6]);
}

#[test]
fn cmm_parameter_count_matches_formula() {
    let (d, t, m) = (6, 3, 2);
    let mut store = ParamStore::<f64>::new();
    Cmm::new(&mut store, &mut Rng::new(1), d, t, m);
    let enc = EncoderConfig {
        d_vid: d,
        frames: t,
        ..EncoderConfig::toy()
    };
    let p = PromptConfig {
        m_v: m,
        ..PromptConfig::toy()
    };
    let fm = formulas(&enc, &p);
    let weights = store.count_where(|e| e.name.ends_with(".w") || e.name.contains(".w_"));
    assert_eq!(weights as u64, fm.cmm_weights);
    assert_eq!(
        store.count_where(|_| true) as u64,
        fm.cmm_weights + fm.cmm_biases
    );
}

#[test]
fn reversed_frames_swap_lstm_directions() {
    let (d, t) = (5, 4);
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(20);
    let cmm = Cmm::new(&mut store, &mut rng, d, t, 1);
    for (a, b) in [
        (cmm.fwd.w_ih, cmm.bwd.w_ih),
        (cmm.fwd.w_hh, cmm.bwd.w_hh),
        (cmm.fwd.b, cmm.bwd.b),
    ] {
        let v = store.value(a).clone();
        *store.value_mut(b) = v;
    }
    let ctx: Vec<Vec<f64>> = (0..t)
        .map(|_| (0..d).map(|_| rng.normal()).collect())
        .collect();
    let rev: Vec<Vec<f64>> = ctx.iter().rev().cloned().collect();
    let mut s = Session::inference(&store);
    let c1 = s.g.constant(Tensor::from_rows(&ctx));
    let c2 = s.g.constant(Tensor::from_rows(&rev));
    let (f1, b1) = cmm.hidden_states(&mut s, c1).unwrap();
    let (f2, b2) = cmm.hidden_states(&mut s, c2).unwrap();
    for step in 0..t {
        assert_eq!(
            s.g.value(f1[step]).data(),
            s.g.value(b2[t - 1 - step]).data()
        );
        assert_eq!(
            s.g.value(b1[step]).data(),
            s.g.value(f2[t - 1 - step]).data()
        );
    }
}

#[test]
fn accounting_reproduces_closed_forms() {
    let enc = EncoderConfig::full_size();
    let p = PromptConfig::full_size();
    let fm = formulas(&enc, &p);
    assert_eq!(fm.ego_vpa_video, 791_552);
    assert_eq!(fm.cmm_weights, 160_432_128);
    assert_eq!(count_params(&enc, &p, Method::ZeroShot).trainable, 0);
    let full = count_params(&enc, &p, Method::Full);
    assert_eq!(full.fraction, 1.0);
    let ego = count_params(&enc, &p, Method::EgoVpa);
    let video: u64 = ego
        .groups
        .iter()
        .filter(|(n, _)| n == "basis" || n == "video_adapter")
        .map(|(_, c)| c)
        .sum();
    assert_eq!(video, 791_552);
    assert_eq!(ego.trainable, 791_552 + 2 * 512 * 512);
}

#[test]
fn methods_parse_by_name() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            format!("\"{}\"", m.name())
        );
    }
    assert!(matches!(
        "vop-x".parse::<Method>(),
        Err(crate::Error::UnknownMethod(_))
    ));
}
