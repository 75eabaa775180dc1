//! Second-order accuracy of the first-order gap change under the surrogate gradient.

use serde::{Deserialize, Serialize};

use crate::codebook::Assignment;
use crate::error::{Error, Result};
use crate::numerics::{dot, least_squares, norm, Rng};
use crate::quantizer::{surrogate_backward, surrogate_forward, SurrogateForm};
use crate::radius::RadiusSpec;

/// Step sizes of the default scaling experiment.
pub const DEFAULT_ETAS: [f64; 4] = [1e-2, 5e-3, 2.5e-3, 1.25e-3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub family: String,
    pub etas: Vec<f64>,
    /// Mean residual per step size.
    pub mean_residuals: Vec<f64>,
    /// Slope of `log(mean residual)` against `log η`.
    pub slope: f64,
    /// Per-trial fitted slopes.
    pub trial_slopes: Vec<f64>,
    pub median_slope: f64,
    pub trials: usize,
    /// Trials whose residual vanished at some step size (nothing to fit).
    pub skipped: usize,
}

/// `|δ′ − (δ + η·⟨s, ∇_z L⟩)|` after one step `z′ = z − η∇_z L` of the
/// surrogate gradient with upstream `g`, where `δ′ = ‖ẑ − z′‖` for the fixed
/// code `ẑ`. For radial radii `⟨s, ∇_z L⟩ = (1 − ρ′(δ))·a`; the sign follows
/// from `s` pointing from `z` toward `ẑ`.
pub fn contraction_residual(
    radius: &RadiusSpec<f64>,
    z: &[f64],
    zhat: &[f64],
    g: &[f64],
    eta: f64,
) -> Result<f64> {
    let a = Assignment::to_code(z, 0, zhat);
    let ctx = surrogate_forward(z, &a, radius, SurrogateForm::UnitDirection)?;
    let grad = surrogate_backward(&ctx, g)?.grad_z;
    let predicted = a.gap + eta * dot(&a.direction, &grad);
    let moved: Vec<f64> = zhat
        .iter()
        .zip(z)
        .zip(&grad)
        .map(|((&c, &x), &gz)| c - (x - eta * gz))
        .collect();
    Ok((norm(&moved) - predicted).abs())
}

/// Fits the log-log slope of the contraction residual against `η` over
/// `trials` random `(z, ẑ, g)` triples in dimension `d` with unit-scale gaps.
pub fn contraction_experiment(
    radius: &RadiusSpec<f64>,
    etas: &[f64],
    trials: usize,
    d: usize,
    seed: u64,
) -> Result<ContractionReport> {
    if etas.len() < 2 || etas.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::Config(
            "need at least two positive step sizes".into(),
        ));
    }
    let ratio = etas[1] / etas[0];
    let geometric = etas
        .windows(2)
        .all(|w| w[1] < w[0] && ((w[1] / w[0]) / ratio - 1.0).abs() < 1e-9);
    if !geometric {
        return Err(Error::Config(
            "step sizes must form a decreasing geometric sequence".into(),
        ));
    }
    if radius.dim().is_some_and(|rd| rd != d) {
        return Err(Error::Config(format!(
            "radius precision is {}-dimensional, expected {d}",
            radius.dim().unwrap_or(0)
        )));
    }
    let log_eta: Vec<f64> = etas.iter().map(|e| e.ln()).collect();
    let mut rng = Rng::new(seed);
    let mut sums = vec![0.0; etas.len()];
    let mut trial_slopes = Vec::with_capacity(trials);
    let mut skipped = 0;
    for _ in 0..trials {
        let zhat: Vec<f64> = rng.normal_vec(d);
        let mut u: Vec<f64> = rng.normal_vec(d);
        let n = norm(&u);
        let gap = rng.uniform_in(0.5, 1.5);
        u.iter_mut()
            .zip(&zhat)
            .for_each(|(x, &c)| *x = c + gap * *x / n);
        let g: Vec<f64> = rng.normal_vec(d);
        let res = etas
            .iter()
            .map(|&eta| contraction_residual(radius, &u, &zhat, &g, eta))
            .collect::<Result<Vec<f64>>>()?;
        if res.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            skipped += 1;
            continue;
        }
        sums.iter_mut().zip(&res).for_each(|(s, r)| *s += r);
        let log_res: Vec<f64> = res.iter().map(|r| r.ln()).collect();
        trial_slopes.push(least_squares(&log_eta, &log_res).0);
    }
    let accepted = trial_slopes.len();
    let mean_residuals: Vec<f64> = sums.iter().map(|s| s / accepted.max(1) as f64).collect();
    let slope = if accepted > 0 {
        let log_mean: Vec<f64> = mean_residuals.iter().map(|r| r.ln()).collect();
        least_squares(&log_eta, &log_mean).0
    } else {
        f64::NAN
    };
    let mut sorted = trial_slopes.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median_slope = sorted.get(accepted / 2).copied().unwrap_or(f64::NAN);
    Ok(ContractionReport {
        family: radius.family().name().to_string(),
        etas: etas.to_vec(),
        mean_residuals,
        slope,
        trial_slopes,
        median_slope,
        trials: accepted,
        skipped,
    })
}
