mod common;

use std::fs;

use gritvq::codebook::TransformConfig;
use gritvq::codebook::{batch_nn, TransformedCache};
use gritvq::gradcheck::{fd_gradient, rel_err, Stencil};
use gritvq::harness::{
    bench_transform_scaling, compare_methods, read_metrics_csv, run_experiment, write_comparison,
    ExperimentConfig, LinearAutoencoder, MethodConfig, SavedRun, SyntheticTask,
};
use gritvq::quantizer::{backward_batch, surrogate_forward, SurrogateForm};
use gritvq::training::{LatentModel, TrainConfig};
use gritvq::{eval_radius, Mat, RadiusSpec, Rng};

fn small(method: MethodConfig, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::collapse_prone(method, seed, 300);
    cfg.log_every = 50;
    cfg
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = small(MethodConfig::grit_default(), 3);
        cfg.out_path = Some(dir.path().join(run));
        let result = run_experiment(&cfg).unwrap();
        let path = dir.path().join(run).join("metrics.csv");
        assert_eq!(read_metrics_csv(&path).unwrap(), result.series);
        bytes.push(fs::read(path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert!(!bytes[0].is_empty());
}

#[test]
fn different_seeds_diverge() {
    let a = run_experiment(&small(MethodConfig::grit_default(), 1)).unwrap();
    let b = run_experiment(&small(MethodConfig::grit_default(), 2)).unwrap();
    assert_ne!(a.series, b.series);
}

#[test]
fn saved_run_reproduces_final_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for (name, mut cfg) in [
        ("grit", small(MethodConfig::grit_default(), 4)),
        ("ste", small(MethodConfig::Ste, 4)),
        ("ae", {
            let mut c = ExperimentConfig::new(
                SyntheticTask::linear_ae(4),
                MethodConfig::Grit {
                    radius: RadiusSpec::euclidean(),
                    transform: TransformConfig {
                        rank: 4,
                        ..TransformConfig::default()
                    },
                    form: SurrogateForm::UnitDirection,
                },
                TrainConfig {
                    steps: 200,
                    seed: 4,
                    ..TrainConfig::default()
                },
                32,
            );
            c.log_every = 50;
            c
        }),
    ] {
        cfg.out_path = Some(dir.path().join(name));
        let result = run_experiment(&cfg).unwrap();
        let saved = SavedRun::load(&dir.path().join(name)).unwrap();
        assert_eq!(saved.config, cfg);
        let (_, eval) = cfg.task.generate::<f64>().unwrap();
        let report = saved.evaluate(&eval).unwrap();
        assert_eq!(report.quant_mse, result.final_metrics.quant_mse, "{name}");
        assert_eq!(
            report.utilization, result.final_metrics.utilization,
            "{name}"
        );
        assert_eq!(saved.assign(&eval).unwrap(), report.indices);
    }
}

#[test]
fn protocol_a_keeps_codebook_and_baselines_move_it() {
    let grit = run_experiment(&small(MethodConfig::grit_default(), 5)).unwrap();
    assert!(!grit.codebook_changed);
    let ste = run_experiment(&small(MethodConfig::Ste, 5)).unwrap();
    assert!(ste.codebook_changed);
}

#[test]
fn comparison_tables_cover_every_method_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs = [
        small(MethodConfig::Ste, 0),
        small(MethodConfig::grit_default(), 0),
    ];
    let c = compare_methods(&cfgs, &[0, 1]).unwrap();
    assert_eq!(c.methods.len(), 2);
    assert_eq!(c.runs.len(), 2);
    assert!(c.runs.iter().all(|r| r.len() == 2));
    assert_eq!(c.paired.len(), 2 * 5);
    write_comparison(dir.path(), &c).unwrap();
    for f in ["summary.csv", "paired.csv", "comparison.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(compare_methods(&cfgs[..1], &[0]).is_err());
}

#[test]
fn config_json_roundtrip_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(MethodConfig::grit_default(), 9);
    let path = dir.path().join("c.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    let mut v: serde_json::Value = serde_json::to_value(&cfg).unwrap();
    v["bogus"] = serde_json::json!(1);
    fs::write(&path, v.to_string()).unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
}

#[test]
fn transform_timing_report_is_well_formed() {
    let r = bench_transform_scaling(&[64, 128, 256], 16, 4, 2, 0).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert_eq!(r.ratios.len(), 2);
    assert!(r
        .rows
        .iter()
        .all(|row| row.min_secs > 0.0 && row.min_secs <= row.mean_secs));
    assert!(bench_transform_scaling(&[128, 64], 16, 4, 2, 0).is_err());
}

/// Encoder weights receive the exact gradient of the decoder loss through
/// the surrogate with the assignment and the direction held fixed.
#[test]
fn autoencoder_encoder_gradient_through_surrogate() {
    let mut rng = Rng::new(12);
    let (ambient, latent, k, n) = (6, 3, 8, 5);
    for radius in [
        RadiusSpec::euclidean(),
        RadiusSpec::SoftClip { tau: 0.8 },
        RadiusSpec::Power { alpha: 0.7 },
    ] {
        let mut ae = LinearAutoencoder::<f64>::new(ambient, latent, 1e-3, &mut rng);
        let x: Mat<f64> = rng.normal_mat(n, ambient);
        let cache = TransformedCache::from_eprime(rng.normal_mat(k, latent), 0);
        let z = ae.encode(&x).unwrap();
        let assignments = batch_nn(&cache, &z).unwrap();
        let contexts: Vec<_> = assignments
            .iter()
            .enumerate()
            .map(|(p, a)| {
                surrogate_forward(z.row(p), a, &radius, SurrogateForm::UnitDirection).unwrap()
            })
            .collect();
        let q = Mat::from_fn(n, latent, |p, j| contexts[p].z_q[j]);
        let (_, grad_q) = ae.decode_loss(&x, &q).unwrap();
        let (grad_z, _, _) = backward_batch(k, &contexts, &grad_q).unwrap();
        ae.backward(&x, &q, &grad_q, &grad_z).unwrap();
        let analytic = ae.pending().unwrap().0.clone();

        let loss = |we: &[f64]| {
            let mut probe = ae.clone();
            probe.we.as_mut_slice().copy_from_slice(we);
            let zp = probe.encode(&x).unwrap();
            // z_q = z + r(ẑ, z)·v with ẑ and v frozen at the forward pass.
            let mut qp = Mat::zeros(n, latent);
            for (p, ctx) in contexts.iter().enumerate() {
                let z = zp.row(p);
                let r = eval_radius(&radius, &ctx.assignment.zhat, z).unwrap().value;
                let v: Vec<f64> = z.iter().zip(&ctx.frozen).map(|(x, f)| x + r * f).collect();
                qp.set_row(p, &v);
            }
            probe.decode_loss(&x, &qp).unwrap().0
        };
        let fd = fd_gradient(loss, ae.we.as_slice(), 1e-5, Stencil::FourthOrder).unwrap();
        let err = rel_err(analytic.as_slice(), &fd);
        assert!(err <= 1e-6, "{radius:?}: {err}");
    }
}

#[test]
fn run_validation_rejects_bad_configs() {
    let mut cfg = small(MethodConfig::grit_default(), 0);
    cfg.k = 1;
    assert!(run_experiment(&cfg).is_err());
    let mut cfg = small(MethodConfig::grit_default(), 0);
    cfg.log_every = 0;
    assert!(run_experiment(&cfg).is_err());
}

#[test]
fn diverging_codebook_aborts_with_step_index() {
    let mut cfg = small(MethodConfig::Ste, 0);
    cfg.train.lr_e = 1e300;
    match run_experiment(&cfg) {
        Err(gritvq::Error::NonFinite { step, .. }) => assert!(step < cfg.train.steps),
        other => panic!(
            "expected a non-finite abort, got {:?}",
            other.map(|r| r.final_metrics)
        ),
    }
}
