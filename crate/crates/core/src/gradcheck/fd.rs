//! Central finite differences and the shared check configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator floor of [`rel_err`], so that two vanishing gradients compare equal.
pub const REL_FLOOR: f64 = 1e-8;

/// Finite-difference stencil.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stencil {
    /// `(f(x + h) − f(x − h)) / 2h`, truncation error `O(h²)`.
    Central,
    /// `(8(f(x + h) − f(x − h)) − (f(x + 2h) − f(x − 2h))) / 12h`,
    /// truncation error `O(h⁴)`.
    #[default]
    FourthOrder,
}

/// Settings shared by the gradient checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdConfig {
    /// Central-difference step.
    pub h: f64,
    pub stencil: Stencil,
    /// Minimum distance gap between the best and second-best code; closer
    /// samples are skipped.
    pub boundary_margin: f64,
    /// Accepted trials per `(d, K)` combination.
    pub trials: usize,
    pub dims: Vec<usize>,
    pub ks: Vec<usize>,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            stencil: Stencil::FourthOrder,
            boundary_margin: 1e-3,
            trials: 200,
            dims: vec![2, 8, 32],
            ks: vec![4, 64],
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Config(format!("h must be positive, got {}", self.h)));
        }
        if !(self.boundary_margin > 0.0) {
            return Err(Error::Config(format!(
                "boundary_margin must be positive, got {}",
                self.boundary_margin
            )));
        }
        if self.trials == 0 || self.dims.is_empty() || self.ks.is_empty() {
            return Err(Error::Config(
                "trials, dims and ks must be non-empty".into(),
            ));
        }
        if self.dims.contains(&0) || self.ks.iter().any(|&k| k < 2) {
            return Err(Error::Config("dims must be >= 1 and ks >= 2".into()));
        }
        Ok(())
    }
}

/// Finite-difference gradient of `f` at `x`, one coordinate at a time.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    h: f64,
    stencil: Stencil,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut at = |probe: &mut Vec<f64>, i: usize, step: f64| {
        probe[i] = x[i] + step;
        let v = f(probe);
        probe[i] = x[i];
        v
    };
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let near = [at(&mut probe, i, h), at(&mut probe, i, -h)];
        let far = match stencil {
            Stencil::Central => [0.0; 2],
            Stencil::FourthOrder => [at(&mut probe, i, 2.0 * h), at(&mut probe, i, -2.0 * h)],
        };
        if !near.iter().chain(&far).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteProbe { coord: i });
        }
        out.push(match stencil {
            Stencil::Central => (near[0] - near[1]) / (2.0 * h),
            Stencil::FourthOrder => (8.0 * (near[0] - near[1]) - (far[0] - far[1])) / (12.0 * h),
        });
    }
    Ok(out)
}

/// `max_i |a_i − b_i| / max(‖a‖∞, ‖b‖∞, REL_FLOOR)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / inf(analytic).max(inf(numeric)).max(REL_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let g = fd_gradient(
            |x| x.iter().map(|v| v * v).sum(),
            &[1.0, 2.0],
            1e-5,
            Stencil::Central,
        )
        .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = fd_gradient(|_| 3.0, &[1.0, -2.0, 0.5], 1e-5, Stencil::FourthOrder).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn product_of_sine() {
        let g = fd_gradient(
            |x| x[0].sin() * x[1],
            &[0.3, 2.0],
            1e-5,
            Stencil::FourthOrder,
        )
        .unwrap();
        assert!((g[0] - 2.0 * 0.3f64.cos()).abs() < 1e-8);
        assert!((g[1] - 0.3f64.sin()).abs() < 1e-8);
    }

    #[test]
    fn nan_reports_coordinate() {
        let err = fd_gradient(
            |x| if x[1] > 1.0 { f64::NAN } else { 0.0 },
            &[0.0, 1.0],
            1e-3,
            Stencil::Central,
        );
        assert!(matches!(err, Err(Error::NonFiniteProbe { coord: 1 })));
    }

    #[test]
    fn halving_h_matches_stencil_order() {
        let f = |x: &[f64]| x[0].exp() * x[1].sin();
        let x = [0.4f64, 1.1];
        let exact = [x[0].exp() * x[1].sin(), x[0].exp() * x[1].cos()];
        let err = |h: f64, s: Stencil| {
            let g = fd_gradient(f, &x, h, s).unwrap();
            (g[0] - exact[0]).abs().max((g[1] - exact[1]).abs())
        };
        let ratio = err(1e-2, Stencil::Central) / err(5e-3, Stencil::Central);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
        let ratio = err(4e-2, Stencil::FourthOrder) / err(2e-2, Stencil::FourthOrder);
        assert!((ratio - 16.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((rel_err(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        FdConfig::default().validate().unwrap();
        let bad = FdConfig {
            h: 0.0,
            ..FdConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = FdConfig {
            boundary_margin: -1.0,
            ..FdConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
