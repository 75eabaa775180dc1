mod common;

use common::{jacobian_spectrum_error, random_context, sigma_max, task_data, to_na};
use gritvq::codebook::{batch_nn, transform_forward, TransformSpec, TransformedCache};
use gritvq::gradcheck::{contraction_experiment, DEFAULT_ETAS};
use gritvq::quantizer::{
    backward_batch, jacobian_dense, ste_forward_backward, surrogate_backward, surrogate_forward,
    transform_backward, SurrogateForm,
};
use gritvq::{Mat, RadiusFamily, RadiusSpec, Rng};

#[test]
fn jacobian_spectrum_for_every_family() {
    let mut rng = Rng::new(1);
    for family in RadiusFamily::ALL {
        for d in [2, 5, 16] {
            for form in [SurrogateForm::UnitDirection, SurrogateForm::RatioForm] {
                for _ in 0..20 {
                    let ctx = random_context(family, d, form, &mut rng);
                    let err = jacobian_spectrum_error(&ctx);
                    assert!(err <= 1e-8, "{family} d={d} {form:?}: {err}");
                }
            }
        }
    }
}

#[test]
fn radial_jacobian_is_non_expansive_when_slope_is_bounded() {
    let mut rng = Rng::new(2);
    for family in RadiusFamily::ALL.into_iter().filter(|f| f.is_radial()) {
        for _ in 0..50 {
            let ctx = random_context(family, 6, SurrogateForm::UnitDirection, &mut rng);
            let norm = sigma_max(&jacobian_dense(&ctx));
            let expected = 1.0f64.max((1.0 - ctx.radius.rho_prime).abs());
            assert!(
                (norm - expected).abs() <= 1e-8,
                "{family}: {norm} vs {expected}"
            );
            if (0.0..=1.0).contains(&ctx.radius.rho_prime) {
                assert!((norm - 1.0).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn jacobian_is_the_symmetric_projector_for_euclidean() {
    let mut rng = Rng::new(3);
    let ctx = random_context(
        RadiusFamily::Euclidean,
        7,
        SurrogateForm::UnitDirection,
        &mut rng,
    );
    let j = to_na(&jacobian_dense(&ctx));
    assert!((&j - j.transpose()).abs().max() <= 1e-15);
    assert!((&j * &j - &j).abs().max() <= 1e-12);
}

#[test]
fn constant_radius_backward_is_straight_through() {
    let mut rng = Rng::new(4);
    for _ in 0..1000 {
        let d = 1 + rng.below(16);
        let cache = TransformedCache::from_eprime(rng.normal_mat(8, d), 0);
        let z: Vec<f64> = rng.normal_vec(d);
        let a = gritvq::codebook::nn_query(&cache, &z).unwrap();
        // Above the knee the clipped radius is the constant τ, so ρ′ ≡ 0.
        let spec = RadiusSpec::Clipped { tau: 0.5 * a.gap };
        let g: Vec<f64> = rng.normal_vec(d);
        let ctx = surrogate_forward(&z, &a, &spec, SurrogateForm::UnitDirection).unwrap();
        let ours = surrogate_backward(&ctx, &g).unwrap();
        let (_, ste) = ste_forward_backward(&a, &g);
        assert_eq!(ours.grad_z, ste);
        assert!(ours.code_signal.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn identity_transform_gives_unselected_codes_zero_gradient() {
    let mut rng = Rng::new(5);
    let data = task_data(5);
    let k = 64;
    let e: Mat<f64> = rng.normal_mat(k, 16).scale(0.5);
    let spec = TransformSpec::identity();
    let cache = TransformedCache::from_eprime(e.clone(), 0);
    let z = common::batch(&data, 16, &mut rng);
    let assignments = batch_nn(&cache, &z).unwrap();
    let contexts: Vec<_> = assignments
        .iter()
        .enumerate()
        .map(|(p, a)| {
            surrogate_forward(
                z.row(p),
                a,
                &RadiusSpec::euclidean(),
                SurrogateForm::UnitDirection,
            )
            .unwrap()
        })
        .collect();
    let upstream: Mat<f64> = rng.normal_mat(16, 16);
    let (_, g, _) = backward_batch(k, &contexts, &upstream).unwrap();
    let fwd = transform_forward(&spec, &e).unwrap();
    let grads = transform_backward(&g, &e, &spec, &fwd).unwrap();
    let selected: Vec<bool> = (0..k)
        .map(|i| assignments.iter().any(|a| a.index == i))
        .collect();
    assert!(selected.iter().any(|&s| !s));
    for i in 0..k {
        let zero = grads.e.row(i).iter().all(|&x| x == 0.0);
        assert_eq!(zero, !selected[i], "row {i}");
    }
}

#[test]
fn gap_contraction_is_second_order() {
    for (spec, label) in [
        (RadiusSpec::euclidean(), "euclidean"),
        (RadiusSpec::Power { alpha: 0.5 }, "power"),
        (RadiusSpec::SoftClip { tau: 0.7 }, "softclip"),
        (RadiusSpec::Huber { delta_h: 2.0 }, "huber"),
    ] {
        let r = contraction_experiment(&spec, &DEFAULT_ETAS, 60, 6, 11).unwrap();
        assert!((1.8..=2.2).contains(&r.slope), "{label}: {r:?}");
        for w in r.mean_residuals.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.0..=5.0).contains(&ratio), "{label}: ratio {ratio}");
        }
    }
}
