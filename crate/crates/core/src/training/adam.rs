//! Bias-corrected adaptive-moment optimizer with decoupled weight decay.

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moment accumulators for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T: Scalar> {
    pub m: Mat<T>,
    pub v: Mat<T>,
    pub t: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> OptState<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Mat::zeros(rows, cols),
            v: Mat::zeros(rows, cols),
            t: 0,
            beta1: T::lit(BETA1),
            beta2: T::lit(BETA2),
            eps: T::lit(EPS),
        }
    }

    pub fn like(p: &Mat<T>) -> Self {
        Self::new(p.rows(), p.cols())
    }
}

/// One step: `p ← p − lr (m̂/(√v̂ + ε) + wd·p)`.
pub fn adam_update<T: Scalar>(
    opt: &mut OptState<T>,
    params: &mut Mat<T>,
    grads: &Mat<T>,
    lr: T,
    weight_decay: T,
) -> Result<()> {
    if params.shape() != grads.shape() || opt.m.shape() != params.shape() {
        return Err(Error::shape(
            "adam_update",
            format!("{:?}", opt.m.shape()),
            format!("params {:?}, grads {:?}", params.shape(), grads.shape()),
        ));
    }
    opt.t += 1;
    let one = T::one();
    let (b1, b2) = (opt.beta1, opt.beta2);
    let c1 = one - b1.powi(opt.t.min(i32::MAX as u64) as i32);
    let c2 = one - b2.powi(opt.t.min(i32::MAX as u64) as i32);
    let m = opt.m.as_mut_slice();
    let v = opt.v.as_mut_slice();
    for (((p, &g), m), v) in params
        .as_mut_slice()
        .iter_mut()
        .zip(grads.as_slice())
        .zip(m)
        .zip(v)
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let step = (*m / c1) / ((*v / c2).sqrt() + opt.eps);
        *p -= lr * (step + weight_decay * *p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = Mat::from_rows(&[[1.0f64, -2.0]]).unwrap();
        let before = p.clone();
        let mut opt = OptState::like(&p);
        for _ in 0..5 {
            adam_update(&mut opt, &mut p, &Mat::zeros(1, 2), 0.1, 0.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut p = Mat::from_rows(&[[0.0f64, 0.0]]).unwrap();
        let g = Mat::from_rows(&[[3.0, -0.01]]).unwrap();
        let mut opt = OptState::like(&p);
        let mut prev = p.clone();
        for _ in 0..2000 {
            adam_update(&mut opt, &mut p, &g, 1e-3, 0.0).unwrap();
            let step = p.sub(&prev).unwrap();
            prev = p.clone();
            assert!((step[(0, 0)] + 1e-3).abs() < 1e-6);
            assert!((step[(0, 1)] - 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_reference_loop() {
        let grads = [
            [0.5f64, -1.0],
            [0.1, 0.2],
            [-0.3, 0.0],
            [2.0, 1.0],
            [0.0, -0.5],
            [1.0, 1.0],
            [-1.0, 0.3],
            [0.2, 0.2],
            [0.9, -0.9],
            [0.0, 0.0],
        ];
        let mut p = Mat::from_rows(&[[1.0f64, 2.0]]).unwrap();
        let mut opt = OptState::like(&p);
        let (mut rp, mut rm, mut rv) = ([1.0f64, 2.0], [0.0f64; 2], [0.0f64; 2]);
        let (lr, wd) = (0.01, 0.1);
        for (t, g) in grads.iter().enumerate() {
            adam_update(&mut opt, &mut p, &Mat::from_rows(&[*g]).unwrap(), lr, wd).unwrap();
            let t = (t + 1) as i32;
            for i in 0..2 {
                rm[i] = 0.9 * rm[i] + (1.0 - 0.9) * g[i];
                rv[i] = 0.999 * rv[i] + (1.0 - 0.999) * g[i] * g[i];
                let mh = rm[i] / (1.0 - 0.9f64.powi(t));
                let vh = rv[i] / (1.0 - 0.999f64.powi(t));
                rp[i] -= lr * (mh / (vh.sqrt() + 1e-8) + wd * rp[i]);
            }
        }
        assert_eq!(p.as_slice(), &rp);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Mat::<f64>::zeros(2, 2);
        let mut opt = OptState::like(&p);
        assert!(adam_update(&mut opt, &mut p, &Mat::zeros(1, 2), 0.1, 0.0).is_err());
    }
}
