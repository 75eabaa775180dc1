//! Straight-through and EMA vector-quantization baselines.

use crate::codebook::Assignment;
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::scalar::Scalar;

/// Straight-through estimator: forward `ẑ`, backward passes `upstream` unchanged.
pub fn ste_forward_backward<T: Scalar>(
    assignment: &Assignment<T>,
    upstream: &[T],
) -> (Vec<T>, Vec<T>) {
    (assignment.zhat.clone(), upstream.to_vec())
}

/// Blends every selected row of `etilde` toward the mean of the latents
/// assigned to it: `ẽ_i ← m ẽ_i + (1 − m) z̄_i`. Unselected rows are unchanged.
pub fn ema_codebook_update<T: Scalar>(
    etilde: &Mat<T>,
    indices: &[usize],
    latents: &Mat<T>,
    momentum: T,
) -> Result<Mat<T>> {
    if !(momentum >= T::zero() && momentum < T::one()) {
        return Err(Error::domain(format!(
            "EMA momentum must lie in [0, 1), got {momentum}"
        )));
    }
    if indices.len() != latents.rows() || latents.cols() != etilde.cols() {
        return Err(Error::shape(
            "ema_codebook_update",
            format!("{} latents of dim {}", indices.len(), etilde.cols()),
            format!("{:?}", latents.shape()),
        ));
    }
    let (k, d) = etilde.shape();
    let mut sums: Mat<T> = Mat::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (&i, z) in indices.iter().zip(latents.iter_rows()) {
        if i >= k {
            return Err(Error::shape(
                "ema_codebook_update",
                format!("index < {k}"),
                i,
            ));
        }
        counts[i] += 1;
        for (s, &x) in sums.row_mut(i).iter_mut().zip(z) {
            *s += x;
        }
    }
    let mut out = etilde.clone();
    let keep = T::one() - momentum;
    for i in 0..k {
        if counts[i] == 0 {
            continue;
        }
        let c = T::lit(counts[i] as f64);
        for (o, &s) in out.row_mut(i).iter_mut().zip(sums.row(i)) {
            *o = momentum * *o + keep * (s / c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ste_passes_upstream() {
        let a = Assignment::to_code(&[0.0, 0.0], 1, &[1.0, 2.0]);
        let (zq, g) = ste_forward_backward(&a, &[0.3, -0.4]);
        assert_eq!(zq, vec![1.0, 2.0]);
        assert_eq!(g, vec![0.3, -0.4]);
    }

    #[test]
    fn zero_momentum_replaces_rows() {
        let e = Mat::from_rows(&[[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]]).unwrap();
        let z = Mat::from_rows(&[[2.0, 3.0], [-1.0, 4.0]]).unwrap();
        let out = ema_codebook_update(&e, &[0, 1], &z, 0.0).unwrap();
        assert_eq!(out.row(0), &[2.0, 3.0]);
        assert_eq!(out.row(1), &[-1.0, 4.0]);
        assert_eq!(out.row(2), &[5.0, 5.0]);
    }

    #[test]
    fn fixed_point_and_cluster_mean() {
        let e = Mat::from_rows(&[[1.0, 2.0], [0.0, 0.0]]).unwrap();
        let z = Mat::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(ema_codebook_update(&e, &[0], &z, 0.99).unwrap(), e);
        let z = Mat::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let out = ema_codebook_update(&e, &[1, 1], &z, 0.5).unwrap();
        assert_eq!(out.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn geometric_convergence() {
        let mut e = Mat::from_rows(&[[4.0, 0.0], [0.0, 0.0]]).unwrap();
        let z = Mat::from_rows(&[[0.0, 0.0]]).unwrap();
        let mut err = 4.0f64;
        for _ in 0..50 {
            e = ema_codebook_update(&e, &[0], &z, 0.9).unwrap();
            let next = e[(0, 0)];
            assert!((next / err - 0.9).abs() < 1e-12);
            err = next;
        }
        assert!(ema_codebook_update(&e, &[0], &z, 1.0).is_err());
    }
}
