mod common;

use common::{naive_attention, qkv, randn, rel_sq, row};
use muse::numerics::stable_logsumexp;
use muse::{attend, attend_causal, attend_sliding, merge_partials, AttentionResult, BiasVector, Rng, Shape4, Tensor4};
use proptest::prelude::*;

fn gather(x: &Tensor4<f64>, idx: &[usize]) -> Tensor4<f64> {
    let s = x.shape();
    let mut data = Vec::new();
    for slice in 0..s.slices() {
        for &i in idx {
            data.extend_from_slice(row(x.slice(slice), i, s.d));
        }
    }
    Tensor4::new(s.with_n(idx.len()), data).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn matches_double_loop_oracle_for_every_mask() {
    let shape = Shape4::new(2, 3, 37, 5);
    let (q, k, v) = qkv(shape, 11);
    let scale = 0.4;
    let full = attend(&q, &k, &v, None, scale).unwrap();
    let causal = attend_causal(&q, &k, &v, scale).unwrap();
    let sliding = attend_sliding(&q, &k, &v, 6, scale).unwrap();
    for s in 0..shape.slices() {
        let (qs, ks, vs) = (q.slice(s), k.slice(s), v.slice(s));
        let (y, mu) = naive_attention(qs, ks, vs, 5, 5, scale, |_, _| true);
        assert_close(full.y.slice(s), &y, 1e-12);
        assert_close(full.mu_slice(s), &mu, 1e-12);
        let (y, mu) = naive_attention(qs, ks, vs, 5, 5, scale, |i, j| j <= i);
        assert_close(causal.y.slice(s), &y, 1e-12);
        assert_close(causal.mu_slice(s), &mu, 1e-12);
        let (y, mu) = naive_attention(qs, ks, vs, 5, 5, scale, |i, j| j <= i && i < j + 6);
        assert_close(sliding.y.slice(s), &y, 1e-12);
        assert_close(sliding.mu_slice(s), &mu, 1e-12);
    }
}

#[test]
fn masked_bias_equals_dropping_the_key() {
    let shape = Shape4::new(1, 2, 12, 4);
    let (q, k, v) = qkv(shape, 3);
    let mut b = vec![0.0; 2 * 12];
    let keep: Vec<usize> = (0..12).filter(|j| j % 3 != 0).collect();
    for h in 0..2 {
        for j in (0..12).step_by(3) {
            b[h * 12 + j] = f64::NEG_INFINITY;
        }
    }
    let bias = BiasVector::new(1, 2, 12, b).unwrap();
    let masked = attend(&q, &k, &v, Some(&bias), 0.5).unwrap();
    let dropped = attend(&q, &gather(&k, &keep), &gather(&v, &keep), None, 0.5).unwrap();
    assert_close(masked.y.data(), dropped.y.data(), 1e-14);
    assert_close(&masked.mu, &dropped.mu, 1e-14);
}

#[test]
fn merged_mu_is_logsumexp_of_part_mus() {
    let shape = Shape4::new(1, 1, 40, 6);
    let (q, k, v) = qkv(shape, 8);
    let parts: Vec<AttentionResult<f64>> = [0..9, 9..25, 25..40]
        .into_iter()
        .map(|r| {
            let idx: Vec<usize> = r.collect();
            attend(&q, &gather(&k, &idx), &gather(&v, &idx), None, 0.3).unwrap()
        })
        .collect();
    let merged = merge_partials(&parts).unwrap();
    for i in 0..40 {
        let mus: Vec<f64> = parts.iter().map(|p| p.mu[i]).collect();
        assert_eq!(merged.mu[i], stable_logsumexp(&mus).unwrap());
    }
}

#[test]
fn merge_grouping_does_not_matter() {
    let shape = Shape4::new(1, 2, 30, 4);
    let (q, k, v) = qkv(shape, 21);
    let parts: Vec<AttentionResult<f64>> = (0..5)
        .map(|p| {
            let idx: Vec<usize> = (0..30).filter(|j| j % 5 == p).collect();
            attend(&q, &gather(&k, &idx), &gather(&v, &idx), None, 0.5).unwrap()
        })
        .collect();
    let flat = merge_partials(&parts).unwrap();
    let left = merge_partials(&[merge_partials(&parts[..2]).unwrap(), merge_partials(&parts[2..]).unwrap()]).unwrap();
    let right = merge_partials(&[
        parts[4].clone(),
        merge_partials(&[parts[1].clone(), parts[3].clone()]).unwrap(),
        merge_partials(&[parts[0].clone(), parts[2].clone()]).unwrap(),
    ])
    .unwrap();
    for other in [&left, &right] {
        assert_close(&flat.mu, &other.mu, 1e-14);
        assert_close(flat.y.data(), other.y.data(), 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_invariance(n in 1usize..48, d in 1usize..8, parts in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let shape = Shape4::new(1, 1, n, d);
        let (q, k, v) = (randn(shape, &mut rng), randn(shape, &mut rng), randn(shape, &mut rng));
        let parts = parts.min(n);
        let mut groups = vec![Vec::new(); parts];
        for j in 0..n {
            let g = if j < parts { j } else { rng.below(parts) };
            groups[g].push(j);
        }
        let full = attend(&q, &k, &v, None, 0.7).unwrap();
        let partials: Vec<_> = groups
            .iter()
            .map(|g| attend(&q, &gather(&k, g), &gather(&v, g), None, 0.7).unwrap())
            .collect();
        let merged = merge_partials(&partials).unwrap();
        prop_assert!(rel_sq(full.y.data(), merged.y.data()) <= 1e-20);
    }
}
