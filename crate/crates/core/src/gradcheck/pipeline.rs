//! Finite-difference checks of the analytic gradients through search,
//! surrogate and transform.

use std::cell::Cell;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{
    apply_transform, batch_nn, build_top_k, clip_in_place, nn_query, transform_forward,
    TransformKind, TransformSpec, TransformedCache,
};
use crate::error::{Error, Result};
use crate::numerics::{mix_seed, sq_dist, Mat, Rng};
use crate::quantizer::{
    backward_batch, surrogate_backward, surrogate_forward, transform_backward, SurrogateContext,
    SurrogateForm,
};
use crate::radius::{eval_radius, RadiusFamily, RadiusSpec};

use super::fd::{fd_gradient, rel_err, FdConfig};

/// Attempts per requested trial before a check gives up.
const MAX_ATTEMPTS_PER_TRIAL: usize = 20;

/// Radius family, transform kind and surrogate form under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradTarget {
    pub family: RadiusFamily,
    pub transform: TransformKind,
    #[serde(default)]
    pub form: SurrogateForm,
}

impl GradTarget {
    pub fn new(family: RadiusFamily, transform: TransformKind) -> Self {
        Self {
            family,
            transform,
            form: SurrogateForm::UnitDirection,
        }
    }

    fn seed(&self, base: u64, salt: u64) -> u64 {
        let f = RadiusFamily::ALL
            .iter()
            .position(|&x| x == self.family)
            .unwrap_or(0) as u64;
        let t = TransformKind::ALL
            .iter()
            .position(|&x| x == self.transform)
            .unwrap_or(0) as u64;
        let form = (self.form == SurrogateForm::RatioForm) as u64;
        mix_seed(mix_seed(base, f * 16 + t * 2 + form), salt)
    }
}

/// Aggregated outcome of a gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub family: String,
    pub transform: String,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Skipped samples over all attempts.
    pub skip_rate: f64,
    /// Accepted trials.
    pub trials: usize,
}

impl GradReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.trials > 0 && self.max_rel_err <= tolerance
    }

    fn from_parts(target: &GradTarget, parts: Vec<(Vec<f64>, usize)>) -> Self {
        let errs: Vec<f64> = parts.iter().flat_map(|(e, _)| e.iter().copied()).collect();
        let skipped: usize = parts.iter().map(|(_, s)| s).sum();
        let trials = errs.len();
        let attempts = trials + skipped;
        let report = Self {
            family: target.family.name().to_string(),
            transform: target.transform.name().to_string(),
            max_rel_err: errs.iter().copied().fold(0.0, f64::max),
            mean_rel_err: if trials > 0 {
                errs.iter().sum::<f64>() / trials as f64
            } else {
                f64::NAN
            },
            skip_rate: if attempts > 0 {
                skipped as f64 / attempts as f64
            } else {
                0.0
            },
            trials,
        };
        if report.skip_rate > 0.5 {
            log::warn!(
                "{} / {}: {:.0}% of samples skipped",
                report.family,
                report.transform,
                100.0 * report.skip_rate
            );
        }
        report
    }
}

/// Random radius of `family` in dimension `d` whose knees and scales sit
/// around `scale` (typically the quantization gap).
pub fn random_radius(family: RadiusFamily, d: usize, scale: f64, rng: &mut Rng) -> RadiusSpec<f64> {
    let around = |rng: &mut Rng| scale * rng.uniform_in(0.3, 3.0);
    match family {
        RadiusFamily::Euclidean => RadiusSpec::Euclidean {},
        RadiusFamily::Clipped => RadiusSpec::Clipped { tau: around(rng) },
        RadiusFamily::Power => RadiusSpec::Power {
            alpha: rng.uniform_in(0.3, 2.0),
        },
        RadiusFamily::Huber => RadiusSpec::Huber {
            delta_h: around(rng),
        },
        RadiusFamily::Mahalanobis => RadiusSpec::Mahalanobis {
            precision: random_precision(d, rng),
        },
        RadiusFamily::SoftClip => RadiusSpec::SoftClip { tau: around(rng) },
        RadiusFamily::PseudoHuber => RadiusSpec::PseudoHuber {
            delta_h: around(rng),
        },
        RadiusFamily::PNorm => RadiusSpec::PNorm {
            p: [1.0, 1.5, 2.0, 3.0][rng.below(4)],
            eps_p: crate::radius::DEFAULT_EPS_P,
        },
        RadiusFamily::Temperature => RadiusSpec::Temperature { temp: around(rng) },
        RadiusFamily::AdaptiveMahalanobis => RadiusSpec::AdaptiveMahalanobis {
            precision: random_precision(d, rng),
            ema_beta: rng.uniform_in(0.05, 1.0),
        },
    }
}

/// `LLᵀ/d + I/2`, a well-conditioned symmetric positive definite matrix.
fn random_precision(d: usize, rng: &mut Rng) -> Mat<f64> {
    let l: Mat<f64> = rng.normal_mat(d, d);
    let mut p = l.matmul_t(&l).expect("square").scale(1.0 / d as f64);
    for i in 0..d {
        p[(i, i)] += 0.5;
    }
    p
}

/// Random transform of `kind` for a `k × d` codebook. `W` is a perturbed
/// identity clipped to the default spectral cap; the final row normalization
/// is switched on for about a third of the draws.
pub fn random_transform(
    kind: TransformKind,
    k: usize,
    d: usize,
    rank: usize,
    rng: &mut Rng,
) -> TransformSpec<f64> {
    let mut w: Mat<f64> = rng.normal_mat::<f64>(d, d).scale(0.4 / (d as f64).sqrt());
    for i in 0..d {
        w[(i, i)] += 1.0;
    }
    let mut spec = match kind {
        TransformKind::Identity => return TransformSpec::identity(),
        TransformKind::LinearLowRank | TransformKind::LowRankNormalized => {
            let r = rank.clamp(1, k.min(d));
            let s = ((k * r) as f64).powf(-0.25);
            let a = rng.normal_mat::<f64>(k, r).scale(s);
            let b = rng.normal_mat::<f64>(k, r).scale(s);
            if kind == TransformKind::LinearLowRank {
                TransformSpec::linear_low_rank(a, b, w)
            } else {
                let mut s = TransformSpec::low_rank_normalized(a, b, w);
                s.norm_temp = rng.uniform_in(0.05, 0.5);
                s
            }
        }
        TransformKind::AttentionTopK => {
            let ds = 1 + rng.below(d.min(4));
            let scale = 1.0 / (d as f64).sqrt();
            let u1 = rng.normal_mat::<f64>(d, ds).scale(scale);
            let v1 = rng.normal_mat::<f64>(d, ds).scale(scale);
            let top = 1 + rng.below(k);
            TransformSpec::attention_top_k(u1, v1, w, top, rng.uniform_in(0.5, 2.0))
        }
    };
    clip_in_place(&mut spec.w, spec.tau_w);
    spec.row_normalize = rng.uniform() < 1.0 / 3.0;
    spec
}

/// Raw codebook with row spacing of order one even for small `d` and large `K`.
fn random_codebook(k: usize, d: usize, rng: &mut Rng) -> Mat<f64> {
    let s = ((k as f64).powf(1.0 / d as f64) / 2.0).max(1.0);
    rng.normal_mat::<f64>(k, d).scale(s)
}

/// Distance from code `j` to the nearest other code.
fn nearest_other(eprime: &Mat<f64>, j: usize) -> f64 {
    (0..eprime.rows())
        .filter(|&l| l != j)
        .map(|l| sq_dist(eprime.row(j), eprime.row(l)))
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Latent near code `j`: `c_j + t·ρ_j·u` with `ρ_j` the distance from `c_j`
/// to its nearest other code and `t ∈ [0.1, 0.45]`, so `c_j` stays the
/// nearest code. `None` when `c_j` coincides with another code.
fn latent_near(eprime: &Mat<f64>, j: usize, rng: &mut Rng) -> Option<Vec<f64>> {
    let cj = eprime.row(j);
    let rho = nearest_other(eprime, j);
    if !(rho > 0.0 && rho.is_finite()) {
        return None;
    }
    let mut u: Vec<f64> = rng.normal_vec(cj.len());
    let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let t = rng.uniform_in(0.1, 0.45) * rho / n;
    u.iter_mut().zip(cj).for_each(|(x, &c)| *x = c + t * *x);
    Some(u)
}

/// The sample sits too close to a Voronoi boundary or to a point where the
/// radius is not smooth enough for finite differences. Every radius goes
/// through `‖ẑ − z‖`, whose curvature grows like `1/δ`, so tiny gaps are
/// excluded for all families.
fn near_singularity(ctx: &SurrogateContext<f64>, radius: &RadiusSpec<f64>, margin: f64) -> bool {
    let a = &ctx.assignment;
    let d: Vec<f64> = a.zhat.iter().zip(&ctx.z).map(|(c, z)| c - z).collect();
    a.margin < margin
        || a.gap < margin
        || radius.near_kink(&d, margin)
        || (radius.unbounded_at_zero() && a.gap < 1e-3)
}

fn half_sq_dist(q: &[f64], y: &[f64]) -> f64 {
    0.5 * sq_dist(q, y)
}

/// `z + r(ẑ, z)·v` with the direction `v` frozen.
fn surrogate_value(
    z: &[f64],
    zhat: &[f64],
    v: &[f64],
    radius: &RadiusSpec<f64>,
) -> Result<Vec<f64>> {
    let r = eval_radius(radius, zhat, z)?.value;
    Ok(z.iter().zip(v).map(|(&x, &vi)| x + r * vi).collect())
}

/// Compares the analytic encoder gradient `∂L/∂z` of
/// `L(z) = ½‖z_q(z) − y‖²` with central differences, for every `(d, K)` in
/// `cfg`. Samples near Voronoi boundaries or radius kinks, and samples whose
/// probes change the selected code, are skipped and counted.
pub fn check_pipeline_gradients(target: &GradTarget, cfg: &FdConfig) -> Result<GradReport> {
    cfg.validate()?;
    let combos: Vec<(usize, usize)> = cfg
        .dims
        .iter()
        .flat_map(|&d| cfg.ks.iter().map(move |&k| (d, k)))
        .collect();
    let parts = combos
        .par_iter()
        .map(|&(d, k)| {
            let mut rng = Rng::new(target.seed(cfg.seed, ((d as u64) << 32) | k as u64));
            let mut errs = Vec::with_capacity(cfg.trials);
            let mut skipped = 0;
            while errs.len() < cfg.trials {
                if skipped > MAX_ATTEMPTS_PER_TRIAL * cfg.trials {
                    break;
                }
                match encoder_trial(target, d, k, cfg, &mut rng)? {
                    Some(e) => errs.push(e),
                    None => skipped += 1,
                }
            }
            Ok((errs, skipped))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradReport::from_parts(target, parts))
}

fn encoder_trial(
    target: &GradTarget,
    d: usize,
    k: usize,
    cfg: &FdConfig,
    rng: &mut Rng,
) -> Result<Option<f64>> {
    let e = random_codebook(k, d, rng);
    // Rank one in d = 2 puts every transformed row on a line, and row
    // normalization then collapses them onto two points.
    let rank = (d / 2).max(2).min(d);
    let spec = random_transform(target.transform, k, d, rank, rng);
    let eprime = apply_transform(&spec, &e)?;
    let j = rng.below(k);
    // Move the selected code to the origin and rescale so its nearest
    // neighbour is at unit distance: gaps are then of order one, where finite
    // differences with the default step are accurate, and no cancellation
    // occurs when E′ has near-duplicate rows. The encoder gradient does not
    // involve the transform parameters, so the moved E′ is as valid a test
    // point.
    let rho = nearest_other(&eprime, j);
    if !(rho > 0.0 && rho.is_finite()) {
        return Ok(None);
    }
    let mut eprime = eprime;
    let cj = eprime.row(j).to_vec();
    for i in 0..k {
        eprime
            .row_mut(i)
            .iter_mut()
            .zip(&cj)
            .for_each(|(x, c)| *x = (*x - c) / rho);
    }
    let cache = TransformedCache::from_eprime(eprime, 0);
    let Some(z) = latent_near(&cache.eprime, j, rng) else {
        return Ok(None);
    };
    let a = nn_query(&cache, &z)?;
    let radius = random_radius(target.family, d, a.gap, rng);
    let ctx = surrogate_forward(&z, &a, &radius, target.form)?;
    if near_singularity(&ctx, &radius, cfg.boundary_margin) || ctx.degenerate {
        return Ok(None);
    }
    let y: Vec<f64> = rng.normal_vec(d);
    let g: Vec<f64> = ctx.z_q.iter().zip(&y).map(|(q, y)| q - y).collect();
    let analytic = surrogate_backward(&ctx, &g)?.grad_z;

    let flipped = Cell::new(false);
    let mut failure = None;
    let fd = fd_gradient(
        |zp| {
            if nn_query(&cache, zp).map_or(true, |b| b.index != a.index) {
                flipped.set(true);
            }
            match surrogate_value(zp, &a.zhat, &ctx.frozen, &radius) {
                Ok(q) => half_sq_dist(&q, &y),
                Err(err) => {
                    failure = Some(err);
                    f64::NAN
                }
            }
        },
        &z,
        cfg.h,
        cfg.stencil,
    );
    if let Some(err) = failure {
        return Err(err);
    }
    let fd = fd?;
    if flipped.get() {
        return Ok(None);
    }
    Ok(Some(rel_err(&analytic, &fd)))
}

/// Compares the analytic gradients of every transform parameter (`W`, `A`,
/// `B`, `U1`, `V1`) and of the raw codebook `E` with central differences of
/// `L = Σ_p ½‖z_q,p − y_p‖²` over a batch of `2K` latents. Probes that change
/// any selected code, or the neighbour sets of an attention mixer, discard
/// the trial (frozen-assignment guard).
pub fn check_transform_gradients(
    target: &GradTarget,
    k: usize,
    d: usize,
    rank: usize,
    cfg: &FdConfig,
) -> Result<GradReport> {
    cfg.validate()?;
    if k < 2 || d == 0 {
        return Err(Error::Config(format!(
            "need K >= 2 and d >= 1, got {k}, {d}"
        )));
    }
    let mut rng = Rng::new(target.seed(cfg.seed, 0x7472_616e));
    let mut errs = Vec::with_capacity(cfg.trials);
    let mut skipped = 0;
    while errs.len() < cfg.trials && skipped <= MAX_ATTEMPTS_PER_TRIAL * cfg.trials {
        match transform_trial(target, k, d, rank, cfg, &mut rng)? {
            Some(e) => errs.push(e),
            None => skipped += 1,
        }
    }
    Ok(GradReport::from_parts(target, vec![(errs, skipped)]))
}

/// Discrete structure that must stay fixed while probing parameters.
#[derive(PartialEq)]
struct Structure {
    indices: Vec<usize>,
    neighbours: Option<Vec<Vec<usize>>>,
}

fn structure(
    spec: &TransformSpec<f64>,
    e: &Mat<f64>,
    z: &Mat<f64>,
) -> Result<(Mat<f64>, Structure)> {
    let eprime = apply_transform(spec, e)?;
    let cache = TransformedCache::from_eprime(eprime.clone(), 0);
    let indices = batch_nn(&cache, z)?.iter().map(|a| a.index).collect();
    let neighbours = if spec.kind == TransformKind::AttentionTopK {
        let m = build_top_k(e, spec)?;
        Some(
            (0..m.n_rows())
                .map(|i| {
                    let mut v = m.row_idx(i).to_vec();
                    v.sort_unstable();
                    v
                })
                .collect(),
        )
    } else {
        None
    };
    Ok((
        eprime,
        Structure {
            indices,
            neighbours,
        },
    ))
}

struct BatchProblem {
    z: Mat<f64>,
    y: Mat<f64>,
    contexts: Vec<SurrogateContext<f64>>,
    radius: RadiusSpec<f64>,
}

impl BatchProblem {
    fn loss(&self, eprime: &Mat<f64>) -> Result<f64> {
        let mut total = 0.0;
        for (p, ctx) in self.contexts.iter().enumerate() {
            let code = eprime.row(ctx.assignment.index);
            let q = surrogate_value(self.z.row(p), code, &ctx.frozen, &self.radius)?;
            total += half_sq_dist(&q, self.y.row(p));
        }
        Ok(total)
    }
}

fn transform_trial(
    target: &GradTarget,
    k: usize,
    d: usize,
    rank: usize,
    cfg: &FdConfig,
    rng: &mut Rng,
) -> Result<Option<f64>> {
    let e = random_codebook(k, d, rng);
    let spec = random_transform(target.transform, k, d, rank, rng);
    let eprime = apply_transform(&spec, &e)?;
    let n = 2 * k;
    let mut z = Mat::zeros(n, d);
    for p in 0..n {
        let Some(row) = latent_near(&eprime, rng.below(k), rng) else {
            return Ok(None);
        };
        z.set_row(p, &row);
    }
    let cache = TransformedCache::from_eprime(eprime, 0);
    let assignments = batch_nn(&cache, &z)?;
    let mut gaps: Vec<f64> = assignments.iter().map(|a| a.gap).collect();
    gaps.sort_by(|a, b| a.total_cmp(b));
    let radius = random_radius(target.family, d, gaps[n / 2], rng);
    let contexts = assignments
        .iter()
        .enumerate()
        .map(|(p, a)| surrogate_forward(z.row(p), a, &radius, target.form))
        .collect::<Result<Vec<_>>>()?;
    if contexts
        .iter()
        .any(|c| c.degenerate || near_singularity(c, &radius, cfg.boundary_margin))
    {
        return Ok(None);
    }
    let y: Mat<f64> = rng.normal_mat(n, d);
    let problem = BatchProblem {
        z,
        y,
        contexts,
        radius,
    };

    let mut upstream = Mat::zeros(n, d);
    for (p, ctx) in problem.contexts.iter().enumerate() {
        let g: Vec<f64> = ctx
            .z_q
            .iter()
            .zip(problem.y.row(p))
            .map(|(q, y)| q - y)
            .collect();
        upstream.set_row(p, &g);
    }
    let (_, g_codes, _) = backward_batch(k, &problem.contexts, &upstream)?;
    let fwd = transform_forward(&spec, &e)?;
    let grads = transform_backward(&g_codes, &e, &spec, &fwd)?;
    let (_, base) = structure(&spec, &e, &problem.z)?;

    let flipped = Cell::new(false);
    let mut failure: Option<Error> = None;
    let mut worst = 0.0f64;
    type Setter = for<'a> fn(&'a mut TransformSpec<f64>, &'a mut Mat<f64>) -> &'a mut Mat<f64>;
    let groups: [(Option<&Mat<f64>>, Setter); 6] = [
        (Some(&grads.e), |_, e| e),
        (grads.w.as_ref(), |s, _| &mut s.w),
        (grads.a.as_ref(), |s, _| &mut s.a),
        (grads.b.as_ref(), |s, _| &mut s.b),
        (grads.u1.as_ref(), |s, _| &mut s.u1),
        (grads.v1.as_ref(), |s, _| &mut s.v1),
    ];
    for (analytic, target_of) in groups {
        let Some(analytic) = analytic else { continue };
        let mut sp = spec.clone();
        let mut ep = e.clone();
        let x0 = target_of(&mut sp, &mut ep).as_slice().to_vec();
        let fd = fd_gradient(
            |x| {
                target_of(&mut sp, &mut ep)
                    .as_mut_slice()
                    .copy_from_slice(x);
                let eval = structure(&sp, &ep, &problem.z).and_then(|(eprime, s)| {
                    if s != base {
                        flipped.set(true);
                    }
                    problem.loss(&eprime)
                });
                eval.unwrap_or_else(|err| {
                    failure = Some(err);
                    f64::NAN
                })
            },
            &x0,
            cfg.h,
            cfg.stencil,
        );
        if let Some(err) = failure.take() {
            return Err(err);
        }
        let fd = fd?;
        if flipped.get() {
            return Ok(None);
        }
        worst = worst.max(rel_err(analytic.as_slice(), &fd));
    }
    Ok(Some(worst))
}
