//! Shared fixtures and dense linear-algebra oracles for the integration tests.

#![allow(dead_code)]

use gritvq::codebook::{init_gaussian, TransformConfig, TransformKind};
use gritvq::harness::SyntheticTask;
use gritvq::quantizer::SurrogateForm;
use gritvq::training::{DirectModel, Protocol, QuantizerKind, TrainConfig, Trainer};
use gritvq::{Mat, RadiusSpec, Rng};
use nalgebra::DMatrix;

pub fn to_na(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Singular values in decreasing order.
pub fn singular_values(m: &Mat<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

pub fn sigma_max(m: &Mat<f64>) -> f64 {
    singular_values(m)[0]
}

/// Eigenvalues of a symmetric matrix in increasing order.
pub fn sym_eigenvalues(m: &Mat<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = to_na(m).symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// Eigenvalues (real parts) of a general square matrix in increasing order,
/// `None` when the Schur iteration does not converge.
pub fn eigenvalues_real(m: &Mat<f64>) -> Option<Vec<f64>> {
    let schur = to_na(m).try_schur(1e-15, 10_000)?;
    let mut v: Vec<f64> = schur.complex_eigenvalues().iter().map(|c| c.re).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(v)
}

/// Training data from the collapse-prone task.
pub fn task_data(seed: u64) -> Mat<f64> {
    SyntheticTask::collapse_prone(seed)
        .generate::<f64>()
        .unwrap()
        .0
}

pub fn batch(data: &Mat<f64>, size: usize, rng: &mut Rng) -> Mat<f64> {
    let idx: Vec<usize> = (0..size).map(|_| rng.below(data.rows())).collect();
    data.select_rows(&idx)
}

/// A direct-latent trainer on 16-dimensional data with a `K = 32` codebook.
pub fn trainer(
    kind: QuantizerKind,
    transform: TransformKind,
    config: TrainConfig,
) -> Trainer<f64, DirectModel> {
    let mut rng = Rng::new(config.seed).fork(1);
    let state = init_gaussian::<f64>(32, 16, &mut rng).unwrap();
    let tcfg = TransformConfig {
        kind: transform,
        rank: 8,
        ..TransformConfig::default()
    };
    let spec = tcfg.build(&state.e, &mut rng).unwrap();
    Trainer::new(
        kind,
        state,
        spec,
        RadiusSpec::euclidean(),
        SurrogateForm::UnitDirection,
        config,
        DirectModel,
    )
    .unwrap()
}

pub fn config(protocol: Protocol, seed: u64) -> TrainConfig {
    TrainConfig {
        protocol,
        seed,
        batch: 64,
        ..TrainConfig::default()
    }
}

pub fn bits(m: &Mat<f64>) -> Vec<u64> {
    m.as_slice().iter().map(|x| x.to_bits()).collect()
}

/// Exhaustive nearest-neighbour oracle: `(index, gap)` with ties broken by
/// the smallest index, distances computed directly from differences.
pub fn naive_nn(eprime: &Mat<f64>, z: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in eprime.iter_rows().enumerate() {
        let d2: f64 = c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    (best.0, best.1.sqrt())
}

/// Violation counts of the distance-distortion sandwich on one random
/// `E′ = (ABᵀ) E W` instance, checked pairwise against dense SVD oracles.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sandwich {
    pub pairs: usize,
    /// `‖c′_i − c′_j‖ ≤ ‖M_i − M_j‖ σmax(E) σmax(W)`
    pub upper: usize,
    /// `‖M_i − M_j‖ σmin(E) σmin(W) ≤ ‖c′_i − c′_j‖` with `σmin(E)` the
    /// operator minimum over `R^K` (zero when `K > d`).
    pub lower_operator: usize,
    /// `‖P(M_i − M_j)‖ σ_d(E) σmin(W) ≤ ‖c′_i − c′_j‖` with `P` the projector
    /// onto the column space of `E`.
    pub lower_projected: usize,
    /// Same as `lower_operator` but with `σmin(E)` read as the `d`-th
    /// singular value; expected to fail for some pairs when `K > d`.
    pub lower_naive: usize,
}

pub fn sandwich_instance(k: usize, d: usize, r: usize, rng: &mut Rng) -> Sandwich {
    let a = rng.normal_mat::<f64>(k, r);
    let b = rng.normal_mat::<f64>(k, r);
    let e = rng.normal_mat::<f64>(k, d);
    let w = rng.normal_mat::<f64>(d, d);
    let spec = gritvq::codebook::TransformSpec::linear_low_rank(a.clone(), b.clone(), w.clone());
    let eprime = to_na(&gritvq::codebook::apply_transform(&spec, &e).unwrap());
    let m = to_na(&a) * to_na(&b).transpose();
    let ena = to_na(&e);
    let se = singular_values(&e);
    let sw = singular_values(&w);
    let (e_max, e_d) = (se[0], se[d.min(k) - 1]);
    let e_op_min = if k > d { 0.0 } else { e_d };
    let (w_max, w_min) = (sw[0], sw[d - 1]);
    let projector = &ena * (ena.transpose() * &ena).try_inverse().unwrap() * ena.transpose();
    let slack = |x: f64| x * (1.0 + 1e-12) + 1e-12;
    let mut out = Sandwich::default();
    for i in 0..k {
        for j in (i + 1)..k {
            let dm = m.row(i) - m.row(j);
            let dc = (eprime.row(i) - eprime.row(j)).norm();
            let dm_norm = dm.norm();
            let dm_proj = (&projector * dm.transpose()).norm();
            out.pairs += 1;
            out.upper += (dc > slack(dm_norm * e_max * w_max)) as usize;
            out.lower_operator += (dm_norm * e_op_min * w_min > slack(dc)) as usize;
            out.lower_projected += (dm_proj * e_d * w_min > slack(dc)) as usize;
            out.lower_naive += (dm_norm * e_d * w_min > slack(dc)) as usize;
        }
    }
    out
}

/// A non-degenerate surrogate context for a random radius of `family`: a
/// random latent assigned to the nearest of 16 random codes.
pub fn random_context(
    family: gritvq::RadiusFamily,
    d: usize,
    form: SurrogateForm,
    rng: &mut Rng,
) -> gritvq::quantizer::SurrogateContext<f64> {
    use gritvq::codebook::{nn_query, TransformedCache};
    loop {
        let cache = TransformedCache::from_eprime(rng.normal_mat(16, d), 0);
        let z: Vec<f64> = rng.normal_vec(d);
        let a = nn_query(&cache, &z).unwrap();
        let radius = gritvq::gradcheck::random_radius(family, d, a.gap, rng);
        let ctx = gritvq::quantizer::surrogate_forward(&z, &a, &radius, form).unwrap();
        if !ctx.degenerate && a.gap > 1e-3 {
            return ctx;
        }
    }
}

/// Largest deviation of the Jacobian spectrum from `{1 ×(d−1), 1 − ρ′·δ/r}`
/// (the last factor is one for the unit-direction form).
pub fn jacobian_spectrum_error(ctx: &gritvq::quantizer::SurrogateContext<f64>) -> f64 {
    let d = ctx.z.len();
    let scale = match ctx.form {
        SurrogateForm::UnitDirection => 1.0,
        SurrogateForm::RatioForm => ctx.assignment.gap / ctx.radius.value,
    };
    let mut expected = vec![1.0; d - 1];
    expected.push(1.0 - ctx.radius.rho_prime * scale);
    expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let Some(got) = eigenvalues_real(&gritvq::quantizer::jacobian_dense(ctx)) else {
        return f64::INFINITY;
    };
    got.iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
