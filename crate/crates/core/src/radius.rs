//! Radius families for the surrogate step.
//!
//! A radius `r(ẑ, z)` sets how far the surrogate moves from `z` along the
//! frozen quantization direction. Radial families are `φ(ρ)` with
//! `ρ = ‖ẑ − z‖₂`; Mahalanobis and p-norm families are not radial but expose
//! the same value/gradient interface.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dot, is_psd, mat_vec, norm, spd_inverse, spectral_norm_default, symmetrize, Mat,
};
use crate::scalar::Scalar;

/// Ridge added to a degenerate sample covariance before inversion.
pub const PRECISION_RIDGE: f64 = 1e-6;

/// Default smoothing of the per-component absolute value in the p-norm family.
pub const DEFAULT_EPS_P: f64 = 1e-8;

/// Radius family together with its hyperparameters.
///
/// JSON form: `{"family": "Power", "params": {"alpha": 0.5}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "family",
    content = "params",
    deny_unknown_fields,
    try_from = "RadiusRepr<T>",
    bound(serialize = "T: Scalar", deserialize = "T: Scalar")
)]
pub enum RadiusSpec<T: Scalar> {
    /// `ρ`
    Euclidean {},
    /// `min(ρ, τ)`
    Clipped { tau: T },
    /// `ρ^α`
    Power { alpha: T },
    /// `ρ²/(2δ)` below the knee, `ρ − δ/2` above.
    Huber { delta_h: T },
    /// `√(dᵀ A d)` with a fixed PSD precision `A`.
    Mahalanobis { precision: Mat<T> },
    /// `τ · tanh(ρ/τ)`
    SoftClip { tau: T },
    /// `δ² (√(1 + (ρ/δ)²) − 1)`
    PseudoHuber { delta_h: T },
    /// Smoothed `‖d‖_p`, shifted so that it vanishes at `d = 0`.
    PNorm { p: T, eps_p: T },
    /// `T · log(1 + ρ/T)`
    Temperature { temp: T },
    /// Mahalanobis radius whose precision tracks residual statistics by EMA.
    AdaptiveMahalanobis { precision: Mat<T>, ema_beta: T },
}

// Mirror used only for deserialization: every variant's params object rejects
// unknown keys and every decoded spec is validated.
#[derive(Deserialize)]
#[serde(
    tag = "family",
    content = "params",
    deny_unknown_fields,
    bound(deserialize = "T: Scalar")
)]
enum RadiusRepr<T: Scalar> {
    Euclidean(NoParams),
    Clipped(TauParams<T>),
    Power(AlphaParams<T>),
    Huber(DeltaParams<T>),
    Mahalanobis(PrecisionParams<T>),
    SoftClip(TauParams<T>),
    PseudoHuber(DeltaParams<T>),
    PNorm(PNormParams<T>),
    Temperature(TempParams<T>),
    AdaptiveMahalanobis(AdaptiveParams<T>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Scalar"))]
struct TauParams<T> {
    tau: T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Scalar"))]
struct AlphaParams<T> {
    alpha: T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Scalar"))]
struct DeltaParams<T> {
    delta_h: T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Scalar"))]
struct PrecisionParams<T: Scalar> {
    precision: Mat<T>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Scalar"))]
struct PNormParams<T> {
    p: T,
    #[serde(default = "default_eps_p")]
    eps_p: T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Scalar"))]
struct TempParams<T> {
    temp: T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Scalar"))]
struct AdaptiveParams<T: Scalar> {
    precision: Mat<T>,
    ema_beta: T,
}

fn default_eps_p<T: Scalar>() -> T {
    T::lit(DEFAULT_EPS_P)
}

impl<T: Scalar> TryFrom<RadiusRepr<T>> for RadiusSpec<T> {
    type Error = Error;

    fn try_from(r: RadiusRepr<T>) -> Result<Self> {
        let spec = match r {
            RadiusRepr::Euclidean(NoParams {}) => RadiusSpec::Euclidean {},
            RadiusRepr::Clipped(p) => RadiusSpec::Clipped { tau: p.tau },
            RadiusRepr::Power(p) => RadiusSpec::Power { alpha: p.alpha },
            RadiusRepr::Huber(p) => RadiusSpec::Huber { delta_h: p.delta_h },
            RadiusRepr::Mahalanobis(p) => RadiusSpec::Mahalanobis {
                precision: p.precision,
            },
            RadiusRepr::SoftClip(p) => RadiusSpec::SoftClip { tau: p.tau },
            RadiusRepr::PseudoHuber(p) => RadiusSpec::PseudoHuber { delta_h: p.delta_h },
            RadiusRepr::PNorm(p) => RadiusSpec::PNorm {
                p: p.p,
                eps_p: p.eps_p,
            },
            RadiusRepr::Temperature(p) => RadiusSpec::Temperature { temp: p.temp },
            RadiusRepr::AdaptiveMahalanobis(p) => RadiusSpec::AdaptiveMahalanobis {
                precision: p.precision,
                ema_beta: p.ema_beta,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Family names without hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RadiusFamily {
    Euclidean,
    Clipped,
    Power,
    Huber,
    Mahalanobis,
    SoftClip,
    PseudoHuber,
    PNorm,
    Temperature,
    AdaptiveMahalanobis,
}

impl RadiusFamily {
    pub const ALL: [RadiusFamily; 10] = [
        RadiusFamily::Euclidean,
        RadiusFamily::Clipped,
        RadiusFamily::Power,
        RadiusFamily::Huber,
        RadiusFamily::Mahalanobis,
        RadiusFamily::SoftClip,
        RadiusFamily::PseudoHuber,
        RadiusFamily::PNorm,
        RadiusFamily::Temperature,
        RadiusFamily::AdaptiveMahalanobis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RadiusFamily::Euclidean => "Euclidean",
            RadiusFamily::Clipped => "Clipped",
            RadiusFamily::Power => "Power",
            RadiusFamily::Huber => "Huber",
            RadiusFamily::Mahalanobis => "Mahalanobis",
            RadiusFamily::SoftClip => "SoftClip",
            RadiusFamily::PseudoHuber => "PseudoHuber",
            RadiusFamily::PNorm => "PNorm",
            RadiusFamily::Temperature => "Temperature",
            RadiusFamily::AdaptiveMahalanobis => "AdaptiveMahalanobis",
        }
    }

    pub fn is_radial(self) -> bool {
        !matches!(
            self,
            RadiusFamily::Mahalanobis | RadiusFamily::AdaptiveMahalanobis | RadiusFamily::PNorm
        )
    }
}

impl fmt::Display for RadiusFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RadiusFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RadiusFamily::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown radius family `{s}`")))
    }
}

/// Radius value with its derivatives at one `(ẑ, z)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RadiusEval<T> {
    pub value: T,
    /// Derivative of the radius along the unit direction `s = (ẑ − z)/δ`;
    /// equals `φ′(δ)` for radial families.
    pub rho_prime: T,
    pub grad_z: Vec<T>,
    pub grad_zhat: Vec<T>,
    /// Euclidean gap `δ = ‖ẑ − z‖₂`.
    pub gap: T,
}

impl<T: Scalar> RadiusEval<T> {
    fn zero(dim: usize, rho_prime: T) -> Self {
        Self {
            value: T::zero(),
            rho_prime,
            grad_z: vec![T::zero(); dim],
            grad_zhat: vec![T::zero(); dim],
            gap: T::zero(),
        }
    }
}

impl<T: Scalar> RadiusSpec<T> {
    pub fn family(&self) -> RadiusFamily {
        match self {
            RadiusSpec::Euclidean {} => RadiusFamily::Euclidean,
            RadiusSpec::Clipped { .. } => RadiusFamily::Clipped,
            RadiusSpec::Power { .. } => RadiusFamily::Power,
            RadiusSpec::Huber { .. } => RadiusFamily::Huber,
            RadiusSpec::Mahalanobis { .. } => RadiusFamily::Mahalanobis,
            RadiusSpec::SoftClip { .. } => RadiusFamily::SoftClip,
            RadiusSpec::PseudoHuber { .. } => RadiusFamily::PseudoHuber,
            RadiusSpec::PNorm { .. } => RadiusFamily::PNorm,
            RadiusSpec::Temperature { .. } => RadiusFamily::Temperature,
            RadiusSpec::AdaptiveMahalanobis { .. } => RadiusFamily::AdaptiveMahalanobis,
        }
    }

    pub fn is_radial(&self) -> bool {
        self.family().is_radial()
    }

    /// Checks every hyperparameter against its domain.
    pub fn validate(&self) -> Result<()> {
        fn positive<T: Scalar>(name: &str, v: T) -> Result<()> {
            if v.is_finite() && v > T::zero() {
                Ok(())
            } else {
                Err(Error::domain(format!(
                    "{name} must be a positive finite number, got {v}"
                )))
            }
        }
        match self {
            RadiusSpec::Euclidean {} => Ok(()),
            RadiusSpec::Clipped { tau } | RadiusSpec::SoftClip { tau } => positive("tau", *tau),
            RadiusSpec::Power { alpha } => positive("alpha", *alpha),
            RadiusSpec::Huber { delta_h } | RadiusSpec::PseudoHuber { delta_h } => {
                positive("delta_h", *delta_h)
            }
            RadiusSpec::PNorm { p, eps_p } => {
                if !(p.is_finite() && *p >= T::one()) {
                    return Err(Error::domain(format!("p must be >= 1, got {p}")));
                }
                positive("eps_p", *eps_p)
            }
            RadiusSpec::Temperature { temp } => positive("temp", *temp),
            RadiusSpec::Mahalanobis { precision } => validate_precision(precision),
            RadiusSpec::AdaptiveMahalanobis {
                precision,
                ema_beta,
            } => {
                validate_beta(*ema_beta)?;
                validate_precision(precision)
            }
        }
    }

    /// `(φ(ρ), φ′(ρ))` for radial families. At a knee (`Clipped` at `ρ = τ`,
    /// `Huber` at `ρ = δ`) the inner-side derivative is returned.
    pub fn radial_profile(&self, rho: T) -> Option<(T, T)> {
        let one = T::one();
        let half = T::lit(0.5);
        Some(match *self {
            RadiusSpec::Euclidean {} => (rho, one),
            RadiusSpec::Clipped { tau } => {
                if rho <= tau {
                    (rho, one)
                } else {
                    (tau, T::zero())
                }
            }
            RadiusSpec::Power { alpha } => {
                if rho == T::zero() {
                    (T::zero(), power_slope_at_zero(alpha))
                } else {
                    (rho.powf(alpha), alpha * rho.powf(alpha - one))
                }
            }
            RadiusSpec::Huber { delta_h } => {
                if rho <= delta_h {
                    (half * rho * rho / delta_h, rho / delta_h)
                } else {
                    (rho - half * delta_h, one)
                }
            }
            RadiusSpec::SoftClip { tau } => {
                let t = (rho / tau).tanh();
                (tau * t, one - t * t)
            }
            RadiusSpec::PseudoHuber { delta_h } => {
                let u = rho / delta_h;
                let q = (one + u * u).sqrt();
                // δ²(q − 1) written as δ² u² / (q + 1) to avoid cancellation near 0
                (delta_h * delta_h * u * u / (q + one), rho / q)
            }
            RadiusSpec::Temperature { temp } => {
                let u = rho / temp;
                (temp * u.ln_1p(), one / (one + u))
            }
            RadiusSpec::Mahalanobis { .. }
            | RadiusSpec::AdaptiveMahalanobis { .. }
            | RadiusSpec::PNorm { .. } => return None,
        })
    }

    /// Upper bound `L_r` on the directional derivative over `δ ∈ (0, ∞)`;
    /// `+∞` when no dimension-free finite bound exists.
    pub fn rho_prime_bound(&self) -> T {
        let one = T::one();
        match self {
            RadiusSpec::Euclidean {}
            | RadiusSpec::Clipped { .. }
            | RadiusSpec::Huber { .. }
            | RadiusSpec::SoftClip { .. }
            | RadiusSpec::Temperature { .. } => one,
            RadiusSpec::Power { alpha } => {
                if *alpha == one {
                    one
                } else {
                    T::infinity()
                }
            }
            RadiusSpec::PseudoHuber { delta_h } => *delta_h,
            RadiusSpec::PNorm { p, .. } => {
                if *p >= T::lit(2.0) {
                    one
                } else {
                    T::infinity()
                }
            }
            RadiusSpec::Mahalanobis { precision }
            | RadiusSpec::AdaptiveMahalanobis { precision, .. } => {
                spectral_norm_default(precision).sqrt()
            }
        }
    }

    /// Scalar hyperparameter that can be learned or annealed, if the family has one.
    pub fn hyper(&self) -> Option<T> {
        match *self {
            RadiusSpec::Clipped { tau } | RadiusSpec::SoftClip { tau } => Some(tau),
            RadiusSpec::Power { alpha } => Some(alpha),
            RadiusSpec::Huber { delta_h } | RadiusSpec::PseudoHuber { delta_h } => Some(delta_h),
            RadiusSpec::Temperature { temp } => Some(temp),
            _ => None,
        }
    }

    pub fn set_hyper(&mut self, value: T) -> Result<()> {
        if !(value.is_finite() && value > T::zero()) {
            return Err(Error::domain(format!(
                "hyperparameter must be positive, got {value}"
            )));
        }
        match self {
            RadiusSpec::Clipped { tau } | RadiusSpec::SoftClip { tau } => *tau = value,
            RadiusSpec::Power { alpha } => *alpha = value,
            RadiusSpec::Huber { delta_h } | RadiusSpec::PseudoHuber { delta_h } => *delta_h = value,
            RadiusSpec::Temperature { temp } => *temp = value,
            _ => {
                return Err(Error::domain(format!(
                    "{} has no scalar hyperparameter",
                    self.family()
                )))
            }
        }
        Ok(())
    }

    /// `∂φ(ρ)/∂θ` for the scalar hyperparameter `θ` of radial families.
    pub fn hyper_derivative(&self, rho: T) -> Option<T> {
        let one = T::one();
        let half = T::lit(0.5);
        Some(match *self {
            RadiusSpec::Clipped { tau } => {
                if rho <= tau {
                    T::zero()
                } else {
                    one
                }
            }
            RadiusSpec::Power { alpha } => {
                if rho > T::zero() {
                    rho.powf(alpha) * rho.ln()
                } else {
                    T::zero()
                }
            }
            RadiusSpec::Huber { delta_h } => {
                if rho <= delta_h {
                    -half * rho * rho / (delta_h * delta_h)
                } else {
                    -half
                }
            }
            RadiusSpec::SoftClip { tau } => {
                let u = rho / tau;
                let t = u.tanh();
                t - u * (one - t * t)
            }
            RadiusSpec::PseudoHuber { delta_h } => {
                let u = rho / delta_h;
                let q = (one + u * u).sqrt();
                T::lit(2.0) * delta_h * u * u / (q + one) - rho * rho / (delta_h * q)
            }
            RadiusSpec::Temperature { temp } => {
                let u = rho / temp;
                u.ln_1p() - u / (one + u)
            }
            _ => return None,
        })
    }

    /// True when `d = ẑ − z` sits within `margin` of a point where the radius
    /// is not twice differentiable, where finite differences are unreliable.
    pub fn near_kink(&self, d: &[T], margin: T) -> bool {
        let rho = norm(d);
        match *self {
            RadiusSpec::Clipped { tau } => (rho - tau).abs() < margin,
            RadiusSpec::Huber { delta_h } => (rho - delta_h).abs() < margin,
            RadiusSpec::PNorm { p, .. } => p < T::lit(2.0) && d.iter().any(|x| x.abs() < margin),
            _ => false,
        }
    }

    /// Derivative blows up as `δ → 0`.
    pub fn unbounded_at_zero(&self) -> bool {
        match *self {
            RadiusSpec::Power { alpha } => alpha < T::one(),
            _ => false,
        }
    }

    /// EMA update of the precision of an adaptive Mahalanobis radius.
    pub fn update_precision(&mut self, residuals: &Mat<T>) -> Result<()> {
        match self {
            RadiusSpec::AdaptiveMahalanobis {
                precision,
                ema_beta,
            } => {
                *precision = update_adaptive_precision(precision, residuals, *ema_beta)?;
                Ok(())
            }
            _ => Err(Error::domain(format!(
                "{} has no adaptive precision",
                self.family()
            ))),
        }
    }

    /// Latent dimension fixed by a precision matrix, if the family has one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            RadiusSpec::Mahalanobis { precision }
            | RadiusSpec::AdaptiveMahalanobis { precision, .. } => Some(precision.rows()),
            _ => None,
        }
    }

    pub fn euclidean() -> Self {
        RadiusSpec::Euclidean {}
    }
}

fn power_slope_at_zero<T: Scalar>(alpha: T) -> T {
    if alpha < T::one() {
        T::infinity()
    } else if alpha == T::one() {
        T::one()
    } else {
        T::zero()
    }
}

fn validate_beta<T: Scalar>(beta: T) -> Result<()> {
    if beta > T::zero() && beta <= T::one() {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "ema_beta must lie in (0, 1], got {beta}"
        )))
    }
}

fn validate_precision<T: Scalar>(a: &Mat<T>) -> Result<()> {
    if a.rows() != a.cols() || a.rows() == 0 {
        return Err(Error::shape(
            "precision",
            "non-empty square matrix",
            format!("{:?}", a.shape()),
        ));
    }
    if !a.is_finite() {
        return Err(Error::domain("precision has non-finite entries"));
    }
    if !is_psd(a, T::lit(1e-10)) {
        return Err(Error::domain(
            "precision must be symmetric positive semidefinite",
        ));
    }
    Ok(())
}

/// Evaluates the radius, its directional derivative and both gradients.
///
/// Gradients are exactly zero when `ẑ = z`.
pub fn eval_radius<T: Scalar>(spec: &RadiusSpec<T>, zhat: &[T], z: &[T]) -> Result<RadiusEval<T>> {
    if zhat.len() != z.len() {
        return Err(Error::shape("eval_radius", zhat.len(), z.len()));
    }
    let dim = z.len();
    let d: Vec<T> = zhat.iter().zip(z).map(|(&a, &b)| a - b).collect();
    let gap = norm(&d);

    match spec {
        RadiusSpec::Mahalanobis { precision }
        | RadiusSpec::AdaptiveMahalanobis { precision, .. } => {
            if precision.shape() != (dim, dim) {
                return Err(Error::shape(
                    "eval_radius precision",
                    format!("{dim}x{dim}"),
                    format!("{:?}", precision.shape()),
                ));
            }
            if gap == T::zero() {
                return Ok(RadiusEval::zero(dim, T::zero()));
            }
            let ad = mat_vec(precision, &d);
            let q = dot(&d, &ad);
            if q < -T::lit(1e-10) * (T::one() + precision.max_abs()) * gap * gap {
                return Err(Error::domain("precision is not positive semidefinite"));
            }
            if q <= T::zero() {
                let mut e = RadiusEval::zero(dim, T::zero());
                e.gap = gap;
                return Ok(e);
            }
            let value = q.sqrt();
            let grad_zhat: Vec<T> = ad.iter().map(|&x| x / value).collect();
            Ok(RadiusEval {
                value,
                rho_prime: value / gap,
                grad_z: grad_zhat.iter().map(|&x| -x).collect(),
                grad_zhat,
                gap,
            })
        }
        RadiusSpec::PNorm { p, eps_p } => {
            if gap == T::zero() {
                return Ok(RadiusEval::zero(dim, T::zero()));
            }
            let (p, eps) = (*p, *eps_p);
            let half_p = p * T::lit(0.5);
            let smooth_sq: Vec<T> = d.iter().map(|&x| x * x + eps * eps).collect();
            let total: T = smooth_sq.iter().map(|&s| s.powf(half_p)).sum();
            let root = total.powf(T::one() / p);
            let offset = T::lit(dim as f64).powf(T::one() / p) * eps;
            let value = (root - offset).max(T::zero());
            let outer = total.powf(T::one() / p - T::one());
            let grad_zhat: Vec<T> = d
                .iter()
                .zip(&smooth_sq)
                .map(|(&x, &s)| outer * s.powf(half_p - T::one()) * x)
                .collect();
            let rho_prime = dot(&grad_zhat, &d) / gap;
            Ok(RadiusEval {
                value,
                rho_prime,
                grad_z: grad_zhat.iter().map(|&x| -x).collect(),
                grad_zhat,
                gap,
            })
        }
        _ => {
            let (value, rho_prime) = spec.radial_profile(gap).expect("radial family");
            if gap == T::zero() {
                return Ok(RadiusEval::zero(dim, rho_prime));
            }
            let coef = rho_prime / gap;
            let grad_zhat: Vec<T> = d.iter().map(|&x| coef * x).collect();
            Ok(RadiusEval {
                value,
                rho_prime,
                grad_z: grad_zhat.iter().map(|&x| -x).collect(),
                grad_zhat,
                gap,
            })
        }
    }
}

/// `(1 − β) A + β Σ̂⁻¹` with `Σ̂` the sample covariance of `residuals` (rows).
///
/// A ridge of [`PRECISION_RIDGE`] is added when there are fewer than `d + 1`
/// residuals or the covariance is not positive definite.
pub fn update_adaptive_precision<T: Scalar>(
    current: &Mat<T>,
    residuals: &Mat<T>,
    beta: T,
) -> Result<Mat<T>> {
    validate_beta(beta)?;
    let dim = current.rows();
    if current.cols() != dim || residuals.cols() != dim {
        return Err(Error::shape(
            "update_adaptive_precision",
            format!("{dim} columns"),
            format!(
                "current {:?}, residuals {:?}",
                current.shape(),
                residuals.shape()
            ),
        ));
    }
    let n = residuals.rows();
    if n == 0 {
        return Err(Error::domain("no residuals for precision update"));
    }
    let mut mean = vec![T::zero(); dim];
    for r in residuals.iter_rows() {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    let nf = T::lit(n as f64);
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut cov = Mat::zeros(dim, dim);
    for r in residuals.iter_rows() {
        for i in 0..dim {
            let di = r[i] - mean[i];
            for j in 0..dim {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    let denom = T::lit(n.saturating_sub(1).max(1) as f64);
    let cov = cov.scale(T::one() / denom);

    let ridged = || {
        let mut c = cov.clone();
        for i in 0..dim {
            c[(i, i)] += T::lit(PRECISION_RIDGE);
        }
        spd_inverse(&c)
    };
    let inv = if n > dim {
        spd_inverse(&cov).or_else(|_| ridged())?
    } else {
        ridged()?
    };
    let mut out = current.scale(T::one() - beta);
    out.add_scaled(&inv, beta)?;
    Ok(symmetrize(&out))
}

/// Linear interpolation of a hyperparameter over training steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl LinearSchedule {
    pub fn value_at(&self, step: usize) -> f64 {
        if self.steps == 0 || step >= self.steps {
            return self.end;
        }
        let t = step as f64 / self.steps as f64;
        self.start + (self.end - self.start) * t
    }
}

/// `log(1 + eˣ)`
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inv_softplus<T: Scalar>(y: T) -> T {
    if y > T::lit(30.0) {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn eval(spec: &RadiusSpec<f64>, zhat: &[f64], z: &[f64]) -> RadiusEval<f64> {
        eval_radius(spec, zhat, z).unwrap()
    }

    /// Radius at distance `rho` along the first axis.
    fn at(spec: &RadiusSpec<f64>, rho: f64) -> RadiusEval<f64> {
        eval(spec, &[rho, 0.0], &[0.0, 0.0])
    }

    #[test]
    fn euclidean_three_four_five() {
        let e = eval(&RadiusSpec::euclidean(), &[3.0, 4.0], &[0.0, 0.0]);
        assert_eq!(e.value, 5.0);
        assert_eq!(e.rho_prime, 1.0);
        assert!((e.grad_zhat[0] - 0.6).abs() < 1e-15);
        assert!((e.grad_zhat[1] - 0.8).abs() < 1e-15);
        assert_eq!(e.grad_z, vec![-e.grad_zhat[0], -e.grad_zhat[1]]);
    }

    fn all_specs() -> Vec<RadiusSpec<f64>> {
        vec![
            RadiusSpec::Euclidean {},
            RadiusSpec::Clipped { tau: 1.0 },
            RadiusSpec::Power { alpha: 0.5 },
            RadiusSpec::Huber { delta_h: 1.0 },
            RadiusSpec::Mahalanobis {
                precision: Mat::diag(&[4.0, 1.0]),
            },
            RadiusSpec::SoftClip { tau: 1.0 },
            RadiusSpec::PseudoHuber { delta_h: 1.0 },
            RadiusSpec::PNorm {
                p: 1.0,
                eps_p: 1e-8,
            },
            RadiusSpec::Temperature { temp: 1.0 },
            RadiusSpec::AdaptiveMahalanobis {
                precision: Mat::identity(2),
                ema_beta: 0.5,
            },
        ]
    }

    #[test]
    fn zero_gap_gives_zero_value_and_gradients() {
        for spec in all_specs() {
            let e = eval(&spec, &[0.3, -1.0], &[0.3, -1.0]);
            assert_eq!(e.value, 0.0, "{:?}", spec.family());
            assert_eq!(e.grad_z, vec![0.0, 0.0]);
            assert_eq!(e.grad_zhat, vec![0.0, 0.0]);
            assert_eq!(e.gap, 0.0);
        }
    }

    #[test]
    fn power_half_at_four() {
        let e = at(&RadiusSpec::Power { alpha: 0.5 }, 4.0);
        assert!((e.value - 2.0).abs() < 1e-15);
        assert!((e.rho_prime - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softclip_saturates() {
        let e = at(&RadiusSpec::SoftClip { tau: 1.0 }, 10.0);
        assert!((e.value - 10f64.tanh()).abs() < 1e-15);
        assert!(e.value < 1.0 && e.value > 0.99999);
    }

    #[test]
    fn huber_branches() {
        let h = RadiusSpec::Huber { delta_h: 1.0 };
        assert!((at(&h, 0.5).value - 0.125).abs() < 1e-15);
        assert!((at(&h, 2.0).value - 1.5).abs() < 1e-15);
        // knee: inner-side derivative
        assert_eq!(at(&h, 1.0).rho_prime, 1.0);
        let c = RadiusSpec::Clipped { tau: 1.0 };
        assert_eq!(at(&c, 1.0).rho_prime, 1.0);
        assert_eq!(at(&c, 1.5).rho_prime, 0.0);
        assert_eq!(at(&c, 1.5).value, 1.0);
    }

    #[test]
    fn mahalanobis_hand_example() {
        let m = RadiusSpec::Mahalanobis {
            precision: Mat::diag(&[4.0, 1.0]),
        };
        let e = eval(&m, &[1.0, 0.0], &[0.0, 0.0]);
        assert!((e.value - 2.0).abs() < 1e-15);
        assert!((e.grad_zhat[0] - 2.0).abs() < 1e-15);
        assert_eq!(e.grad_zhat[1], 0.0);
    }

    #[test]
    fn shape_and_domain_errors() {
        assert!(matches!(
            eval_radius(&RadiusSpec::<f64>::euclidean(), &[1.0], &[1.0, 2.0]),
            Err(Error::Shape { .. })
        ));
        let bad = RadiusSpec::Mahalanobis {
            precision: Mat::diag(&[1.0, -1.0]),
        };
        assert!(bad.validate().is_err());
        assert!(matches!(
            eval_radius(&bad, &[0.0, 1.0], &[0.0, 0.0]),
            Err(Error::Domain(_))
        ));
        assert!(RadiusSpec::Power { alpha: -1.0 }.validate().is_err());
        assert!(RadiusSpec::PNorm {
            p: 0.5,
            eps_p: 1e-8
        }
        .validate()
        .is_err());
    }

    #[test]
    fn rho_prime_bounds() {
        assert_eq!(RadiusSpec::<f64>::euclidean().rho_prime_bound(), 1.0);
        assert_eq!(RadiusSpec::SoftClip { tau: 3.0 }.rho_prime_bound(), 1.0);
        assert!(RadiusSpec::Power { alpha: 0.5f64 }
            .rho_prime_bound()
            .is_infinite());
        assert!(RadiusSpec::Power { alpha: 1.5f64 }
            .rho_prime_bound()
            .is_infinite());
        assert_eq!(RadiusSpec::Power { alpha: 1.0 }.rho_prime_bound(), 1.0);
        let m = RadiusSpec::Mahalanobis {
            precision: Mat::diag(&[4.0f64, 1.0]),
        };
        assert!((m.rho_prime_bound() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn bounds_dominate_sampled_derivatives() {
        let mut rng = Rng::new(4);
        for spec in all_specs() {
            let bound = spec.rho_prime_bound();
            for _ in 0..500 {
                let zhat: Vec<f64> = rng.normal_vec(2);
                let e = eval(&spec, &zhat, &[0.0, 0.0]);
                assert!(e.rho_prime >= 0.0);
                assert!(e.rho_prime <= bound + 1e-12, "{:?}", spec.family());
            }
        }
    }

    #[test]
    fn precision_blend_diag_example() {
        // direct check of the blend rule with an exactly known inverse covariance
        let current = Mat::<f64>::identity(2);
        let inv = Mat::diag(&[3.0, 1.0]);
        let mut expected = current.scale(0.5);
        expected.add_scaled(&inv, 0.5).unwrap();
        assert_eq!(expected, Mat::diag(&[2.0, 1.0]));
        // residuals whose sample covariance inverse is diag(3, 1)
        // four points (±sx, ±sy): variances 4sx²/3 = 1/3 and 4sy²/3 = 1
        let sx = 0.5f64;
        let sy = 0.75f64.sqrt();
        let res = Mat::from_rows(&[[sx, sy], [-sx, -sy], [sx, -sy], [-sx, sy]]).unwrap();
        let out = update_adaptive_precision(&current, &res, 0.5).unwrap();
        assert!(out.sub(&Mat::diag(&[2.0, 1.0])).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn precision_beta_domain() {
        let res = Mat::<f64>::identity(2);
        assert!(matches!(
            update_adaptive_precision(&Mat::identity(2), &res, 0.0),
            Err(Error::Domain(_))
        ));
        assert!(update_adaptive_precision(&Mat::identity(2), &res, 1.5).is_err());
    }

    #[test]
    fn degenerate_covariance_gets_ridge() {
        // single residual: covariance is zero, inverse falls back to 1/ridge
        let res = Mat::from_rows(&[[1.0, 2.0]]).unwrap();
        let out = update_adaptive_precision(&Mat::<f64>::identity(2), &res, 1.0).unwrap();
        assert!((out[(0, 0)] - 1.0 / PRECISION_RIDGE).abs() < 1e-3);
        assert!(out.is_finite());
    }

    #[test]
    fn json_roundtrip_and_unknown_fields() {
        let spec = RadiusSpec::Power { alpha: 0.5f64 };
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(s, r#"{"family":"Power","params":{"alpha":0.5}}"#);
        assert_eq!(serde_json::from_str::<RadiusSpec<f64>>(&s).unwrap(), spec);
        let e: RadiusSpec<f64> =
            serde_json::from_str(r#"{"family":"Euclidean","params":{}}"#).unwrap();
        assert_eq!(e, RadiusSpec::Euclidean {});
        assert!(serde_json::from_str::<RadiusSpec<f64>>(
            r#"{"family":"Power","params":{"alpha":0.5,"beta":1}}"#
        )
        .is_err());
        assert!(serde_json::from_str::<RadiusSpec<f64>>(
            r#"{"family":"Power","params":{"alpha":0.5},"extra":1}"#
        )
        .is_err());
        assert!(serde_json::from_str::<RadiusSpec<f64>>(
            r#"{"family":"Power","params":{"alpha":-0.5}}"#
        )
        .is_err());
        assert!(
            serde_json::from_str::<RadiusSpec<f64>>(r#"{"family":"Nope","params":{}}"#).is_err()
        );
    }

    #[test]
    fn schedule_and_softplus() {
        let s = LinearSchedule {
            start: 2.0,
            end: 1.0,
            steps: 10,
        };
        assert_eq!(s.value_at(0), 2.0);
        assert_eq!(s.value_at(5), 1.5);
        assert_eq!(s.value_at(50), 1.0);
        for y in [1e-3f64, 0.5, 1.0, 7.0, 40.0] {
            assert!((softplus(inv_softplus(y)) - y).abs() < 1e-12 * (1.0 + y));
        }
    }

    #[test]
    fn family_names_parse() {
        for f in RadiusFamily::ALL {
            assert_eq!(f.name().parse::<RadiusFamily>().unwrap(), f);
        }
        assert!("softclip".parse::<RadiusFamily>().is_ok());
        assert!("bogus".parse::<RadiusFamily>().is_err());
    }
}
