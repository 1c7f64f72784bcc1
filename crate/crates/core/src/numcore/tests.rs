use std::sync::Arc;

use proptest::prelude::{prop_assert, proptest};

use super::*;
use crate::verify::{composite, composite_leaves};
use crate::Error;

fn rand_t(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect())
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, k) = a.dims2();
    let m = b.cols();
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(i, p) * b.get(p, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn attn_vars(g: &mut Graph<f64>, rng: &mut Rng, d: usize) -> AttentionVars {
    let mut w = || g.param(rand_t(rng, d, d).map(|x| x * 0.4));
    let (wq, wk, wv, wo) = (w(), w(), w(), w());
    let mut b = || g.param(rand_t(rng, 1, d).map(|x| x * 0.1));
    let (bq, bk, bv, bo) = (b(), b(), b(), b());
    AttentionVars {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

#[test]
fn linear_identity_input() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::identity(2));
    let w = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let y = g.linear(x, w, None).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn linear_identity_weight_with_bias() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::row_vector(vec![1.0, 1.0]));
    let w = g.constant(Tensor::identity(2));
    let b = g.constant(Tensor::new(vec![2], vec![5.0, 5.0]).unwrap());
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[6.0, 6.0]);
}

#[test]
fn linear_matches_naive_triple_loop() {
    let mut rng = Rng::new(11);
    let a = rand_t(&mut rng, 3, 4);
    let b = rand_t(&mut rng, 4, 2);
    let expect = naive_matmul(&a, &b);
    let mut g = Graph::new();
    let (x, w) = (g.constant(a), g.constant(b));
    let y = g.linear(x, w, None).unwrap();
    for (u, v) in g.value(y).data().iter().zip(expect.data()) {
        assert!((u - v).abs() <= 1e-12);
    }
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[4, 2]));
    match g.linear(x, w, None) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!(
            "expected shape error, got {other:?}",
            other = other.map(|v| v.index())
        ),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::row_vector(vec![0.0, 0.0, 0.0]));
    let y = g.softmax_rows(x);
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::row_vector(vec![1000.0, 0.0]));
    let y = g.softmax_rows(x);
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() <= 1e-12 && d[1].abs() <= 1e-12);
    assert!(d.iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_axis_zero_normalizes_columns() {
    let mut rng = Rng::new(2);
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_t(&mut rng, 3, 4));
    let y = g.softmax(x, 0).unwrap();
    let t = g.value(y);
    for c in 0..4 {
        let s: f64 = (0..3).map(|r| t.get(r, c)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!(g.softmax(x, 2).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(Tensor::filled(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(Tensor::row_vector(vec![2.5, 2.5, 2.5]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));

    let gain2 = g.constant(Tensor::filled(&[2], 1.0));
    let bias2 = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::row_vector(vec![1.0, -1.0]));
    let y = g.layer_norm(x, gain2, bias2, 1e-14).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] + 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_random_row_moments() {
    let mut rng = Rng::new(5);
    let mut g = Graph::<f64>::new();
    let d = 16;
    let gain = g.constant(Tensor::filled(&[d], 1.0));
    let bias = g.constant(Tensor::zeros(&[d]));
    let eps = 1e-5;
    let x = g.constant(rand_t(&mut rng, 1, d));
    let raw_var = {
        let v = g.value(x).data();
        let m = v.iter().sum::<f64>() / d as f64;
        v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / d as f64
    };
    let y = g.layer_norm(x, gain, bias, eps).unwrap();
    let v = g.value(y).data();
    let mean = v.iter().sum::<f64>() / d as f64;
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
    assert!(mean.abs() <= 1e-12);
    assert!((var - raw_var / (raw_var + eps)).abs() < 1e-12);
}

#[test]
fn attention_single_key_returns_value_projection() {
    let mut rng = Rng::new(8);
    let d = 8;
    let mut g = Graph::<f64>::new();
    let w = attn_vars(&mut g, &mut rng, d);
    let q = g.constant(rand_t(&mut rng, 3, d));
    let kv = g.constant(rand_t(&mut rng, 1, d));
    let mask = Arc::new(AttentionMask::full(3, 1));
    let out = masked_attention(&mut g, q, kv, &mask, 2, &w).unwrap();
    let vp = g.linear(kv, w.wv, Some(w.bv)).unwrap();
    let expect = g.linear(vp, w.wo, Some(w.bo)).unwrap();
    for r in 0..3 {
        for (a, b) in g.value(out).row(r).iter().zip(g.value(expect).row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_self_only_mask() {
    let mut rng = Rng::new(9);
    let d = 8;
    let mut g = Graph::<f64>::new();
    let w = attn_vars(&mut g, &mut rng, d);
    let x = g.constant(rand_t(&mut rng, 4, d));
    let mask = Arc::new(AttentionMask::from_fn(4, 4, |i, j| i == j));
    let out = masked_attention(&mut g, x, x, &mask, 4, &w).unwrap();
    let vp = g.linear(x, w.wv, Some(w.bv)).unwrap();
    let expect = g.linear(vp, w.wo, Some(w.bo)).unwrap();
    for (a, b) in g.value(out).data().iter().zip(g.value(expect).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Dense per-head reference: softmax(q k^T / sqrt(d_h)) v, written without the
/// fused kernel.
fn dense_attention_reference(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    heads: usize,
) -> Tensor<f64> {
    let (nq, d) = q.dims2();
    let nk = k.rows();
    let dh = d / heads;
    let mut out = Tensor::zeros(&[nq, d]);
    for h in 0..heads {
        let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
        for i in 0..nq {
            let logits: Vec<f64> = (0..nk)
                .map(|j| {
                    cols.iter().map(|&c| q.get(i, c) * k.get(j, c)).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for &c in &cols {
                let s: f64 = (0..nk).map(|j| e[j] / z * v.get(j, c)).sum();
                out.set(i, c, s);
            }
        }
    }
    out
}

#[test]
fn attention_matches_dense_reference() {
    let mut rng = Rng::new(10);
    let (n, d, heads) = (4, 8, 2);
    let qt = rand_t(&mut rng, n, d);
    let kt = rand_t(&mut rng, n, d);
    let vt = rand_t(&mut rng, n, d);
    let expect = dense_attention_reference(&qt, &kt, &vt, heads);
    let mut g = Graph::<f64>::new();
    let (q, k, v) = (g.constant(qt), g.constant(kt), g.constant(vt));
    let out = g
        .attention(q, k, v, &Arc::new(AttentionMask::full(n, n)), heads)
        .unwrap();
    for (a, b) in g.value(out).data().iter().zip(expect.data()) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn attention_fully_masked_row_is_config_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 4]));
    let mask = Arc::new(AttentionMask::from_fn(2, 2, |i, _| i == 0));
    assert!(matches!(
        g.attention(x, x, x, &mask, 2),
        Err(Error::Config(_))
    ));
}

#[test]
fn attention_masked_positions_get_zero_mass() {
    let mut rng = Rng::new(12);
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_t(&mut rng, 5, 4).map(|v| v * 30.0));
    let mask = Arc::new(AttentionMask::from_fn(5, 5, |i, j| {
        (i + j) % 2 == 0 || i == j
    }));
    let out = g.attention(x, x, x, &mask, 2).unwrap();
    let probs = g.attention_probs(out).unwrap();
    for h in 0..2 {
        for i in 0..5 {
            for j in 0..5 {
                if !mask.allows(i, j) {
                    assert_eq!(probs[(h * 5 + i) * 5 + j], 0.0);
                }
            }
        }
    }
}

#[test]
fn backward_sum_gives_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2, 3]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_square_and_accumulation() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 12.0);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_and_constant_targets() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    let c = g.constant(Tensor::scalar(1.0));
    assert!(matches!(g.backward(c), Err(Error::Contract(_))));
}

#[test]
fn constants_never_receive_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let c = g.constant(Tensor::scalar(5.0));
    let y = g.mul(x, c).unwrap();
    g.backward(y).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().item(), 5.0);
}

#[test]
fn composite_gradients_match_finite_differences() {
    let mut rng = Rng::new(1);
    let leaves = composite_leaves(&mut rng);
    let err = finite_diff_check(&leaves, 1e-5, None, composite).unwrap();
    assert!(err <= 1e-5, "relative error {err}");
}

#[test]
fn sum_of_squares_check_is_tight() {
    let mut rng = Rng::new(3);
    let leaf = rand_t(&mut rng, 3, 3);
    let err = finite_diff_check(&[leaf], 1e-5, None, |g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(err <= 1e-7, "relative error {err}");
}

#[test]
fn corrupted_backward_rules_are_detected() {
    let mut rng = Rng::new(4);
    let leaves = composite_leaves(&mut rng);
    for fault in [
        Fault::SoftmaxBackward,
        Fault::AttentionBackward,
        Fault::LayerNormBackward,
    ] {
        let err = finite_diff_check(&leaves, 1e-5, Some(fault), composite).unwrap();
        assert!(err > 1e-2, "{fault:?} went unnoticed (error {err})");
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = Rng::new(99);
        let leaves = composite_leaves(&mut rng);
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.into_iter().map(|t| g.constant(t)).collect();
        let out = composite(&mut g, &vars).unwrap();
        g.value(out).item().to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn works_in_single_precision() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::row_vector(vec![1.0f32, 2.0, 3.0]));
    let s = g.softmax_rows(x);
    let sum: f32 = g.value(s).data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
    let l = g.sum(s);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().max_abs() < 1e-6);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::row_vector(vals));
        let y = g.softmax_rows(x);
        let s: f64 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        prop_assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn layer_norm_rows_are_centered(vals in proptest::collection::vec(-20.0f64..20.0, 2..16)) {
        let d = vals.len();
        let mut g = Graph::<f64>::new();
        let gain = g.constant(Tensor::filled(&[d], 1.0));
        let bias = g.constant(Tensor::zeros(&[d]));
        let x = g.constant(Tensor::row_vector(vals));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / d as f64;
        prop_assert!(mean.abs() <= 1e-10);
    }
}
