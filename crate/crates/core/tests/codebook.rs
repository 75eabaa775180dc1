mod common;

use common::{naive_nn, sandwich_instance, sigma_max, singular_values, to_na};
use gritvq::codebook::{
    apply_transform, batch_nn, build_top_k, load_codebook, nn_query, refresh_cache, save_codebook,
    spectral_clip, CodebookState, TransformKind, TransformSpec, TransformedCache,
};
use gritvq::gradcheck::random_transform;
use gritvq::{Mat, Rng};
use proptest::prelude::*;

#[test]
fn brute_force_search_matches_exhaustive_oracle() {
    let mut rng = Rng::new(3);
    let cache = TransformedCache::from_eprime(rng.normal_mat(1024, 32), 0);
    let z: Mat<f64> = rng.normal_mat(2000, 32);
    let fast = batch_nn(&cache, &z).unwrap();
    for (p, a) in fast.iter().enumerate() {
        let (index, gap) = naive_nn(&cache.eprime, z.row(p));
        assert_eq!(a.index, index, "query {p}");
        assert!((a.gap - gap).abs() <= 1e-10, "query {p}");
    }
}

#[test]
fn search_is_exact_on_duplicated_and_clustered_codes() {
    let mut rng = Rng::new(4);
    // Codes far from the origin and a few exact duplicates stress the
    // precomputed-norm ranking.
    let mut e: Mat<f64> = rng.normal_mat(64, 8).map(|x| 1e3 + 1e-3 * x);
    let dup = e.row(5).to_vec();
    e.set_row(40, &dup);
    let cache = TransformedCache::from_eprime(e, 0);
    for _ in 0..500 {
        let z: Vec<f64> = rng
            .normal_vec::<f64>(8)
            .iter()
            .map(|x| 1e3 + 1e-3 * x)
            .collect();
        let a = nn_query(&cache, &z).unwrap();
        let (index, gap) = naive_nn(&cache.eprime, &z);
        assert_eq!(a.index, index);
        assert!((a.gap - gap).abs() <= 1e-10);
    }
}

#[test]
fn distortion_sandwich_on_random_instances() {
    let mut rng = Rng::new(5);
    let mut naive = 0;
    for _ in 0..50 {
        let s = sandwich_instance(8, 4, 4, &mut rng);
        assert_eq!(s.pairs, 28);
        assert_eq!(s.upper, 0);
        assert_eq!(s.lower_operator, 0);
        assert_eq!(s.lower_projected, 0);
        naive += s.lower_naive;
    }
    // With K > d, reading σmin(E) as the d-th singular value gives a bound
    // that does not hold in general.
    assert!(naive > 0);
}

#[test]
fn square_codebook_sandwich_is_tight_enough() {
    // K = d: the operator and projected bounds coincide and are non-trivial.
    let mut rng = Rng::new(6);
    for _ in 0..20 {
        let s = sandwich_instance(4, 4, 4, &mut rng);
        assert_eq!(
            (s.upper, s.lower_operator, s.lower_projected, s.lower_naive),
            (0, 0, 0, 0)
        );
    }
}

#[test]
fn gauge_rescaling_leaves_transformed_codes_unchanged() {
    let mut rng = Rng::new(7);
    for _ in 0..20 {
        let (k, d) = (12, 5);
        let e: Mat<f64> = rng.normal_mat(k, d);
        let spec = TransformSpec::linear_low_rank(
            rng.normal_mat(k, 3),
            rng.normal_mat(k, 3),
            rng.normal_mat(d, d),
        );
        let lambda: Vec<f64> = (0..d)
            .map(|_| rng.uniform_in(0.2, 5.0) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 })
            .collect();
        let e2 = Mat::from_fn(k, d, |i, j| e[(i, j)] * lambda[j]);
        let mut spec2 = spec.clone();
        spec2.w = Mat::from_fn(d, d, |i, j| spec.w[(i, j)] / lambda[i]);
        let a = apply_transform(&spec, &e).unwrap();
        let b = apply_transform(&spec2, &e2).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() <= 1e-12 * (1.0 + a.max_abs()));
        let z: Mat<f64> = rng.normal_mat(50, d);
        let ia: Vec<usize> = batch_nn(&TransformedCache::from_eprime(a, 0), &z)
            .unwrap()
            .iter()
            .map(|x| x.index)
            .collect();
        let ib: Vec<usize> = batch_nn(&TransformedCache::from_eprime(b, 0), &z)
            .unwrap()
            .iter()
            .map(|x| x.index)
            .collect();
        assert_eq!(ia, ib);
    }
}

#[test]
fn cached_rows_are_unit_when_normalization_is_on() {
    let mut rng = Rng::new(8);
    for kind in TransformKind::ALL {
        for _ in 0..10 {
            let e = CodebookState::new(rng.normal_mat(32, 6)).unwrap();
            let spec = random_transform(kind, 32, 6, 3, &mut rng).with_row_normalize(true);
            let cache = refresh_cache(&e, &spec, 0, None).unwrap();
            for n in cache.eprime.row_norms() {
                assert!((n - 1.0).abs() <= 1e-10, "{kind}: {n}");
            }
        }
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let mut rng = Rng::new(9);
    for _ in 0..20 {
        let k = 2 + rng.below(40);
        let d = 1 + rng.below(8);
        let e: Mat<f64> = rng.normal_mat(k, d).scale(3.0);
        let spec = random_transform(TransformKind::AttentionTopK, k, d, 1, &mut rng);
        let mixer = build_top_k(&e, &spec).unwrap();
        for i in 0..k {
            let w = mixer.row_weights(i);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn saved_codebook_reloads_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(10);
    for kind in TransformKind::ALL {
        let e = CodebookState::new(rng.normal_mat(16, 4)).unwrap();
        let spec = random_transform(kind, 16, 4, 2, &mut rng);
        let path = dir.path().join(format!("{kind}.json"));
        save_codebook(&path, &e, &spec).unwrap();
        let (e2, spec2) = load_codebook::<f64>(&path).unwrap();
        assert_eq!(e2.e, e.e);
        assert_eq!(spec2, spec);
        let z: Mat<f64> = rng.normal_mat(100, 4);
        let a = batch_nn(&refresh_cache(&e, &spec, 0, None).unwrap(), &z).unwrap();
        let b = batch_nn(&refresh_cache(&e2, &spec2, 0, None).unwrap(), &z).unwrap();
        assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn spectral_clip_agrees_with_svd(seed in any::<u64>(), n in 1usize..9, m in 1usize..9, tau in 0.1f64..4.0) {
        let mut rng = Rng::new(seed);
        let w: Mat<f64> = rng.normal_mat(n, m);
        let sigma = sigma_max(&w);
        let clipped = spectral_clip(&w, tau);
        let after = singular_values(&clipped);
        prop_assert!(after[0] <= tau + 1e-6);
        if sigma <= tau {
            prop_assert_eq!(&clipped, &w);
        } else {
            // A uniform rescale: the singular values shrink by one common factor.
            let before = singular_values(&w);
            let c = tau / sigma;
            for (a, b) in after.iter().zip(&before) {
                prop_assert!((a - c * b).abs() <= 1e-6 * (1.0 + b));
            }
        }
    }

    #[test]
    fn low_rank_transform_matches_dense_product(seed in any::<u64>(), k in 2usize..20, d in 1usize..8, r in 1usize..4) {
        let r = r.min(k).min(d);
        let mut rng = Rng::new(seed);
        let (a, b) = (rng.normal_mat::<f64>(k, r), rng.normal_mat::<f64>(k, r));
        let (e, w) = (rng.normal_mat::<f64>(k, d), rng.normal_mat::<f64>(d, d));
        let out = to_na(&apply_transform(&TransformSpec::linear_low_rank(a.clone(), b.clone(), w.clone()), &e).unwrap());
        let dense = to_na(&a) * to_na(&b).transpose() * to_na(&e) * to_na(&w);
        prop_assert!((out - &dense).abs().max() <= 1e-12 * (1.0 + dense.abs().max()));
    }
}
