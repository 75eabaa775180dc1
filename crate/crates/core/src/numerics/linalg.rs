use super::{norm, Mat, Rng};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SPECTRAL_ITERS: usize = 50;
pub const SPECTRAL_TOL: f64 = 1e-9;

/// Seed of the fixed power-iteration start vector.
const SPECTRAL_SEED: u64 = 0x5EC7_0A11;

/// Number of Gram-matrix squarings done before the power steps. Each squaring
/// doubles the effective iteration count, so clustered top singular values
/// still converge.
const GRAM_SQUARINGS: usize = 30;

/// Largest singular value of `w` by power iteration.
///
/// Works on the Gram matrix of the smaller side. The Gram matrix is first
/// raised to a large power by repeated squaring, then refined with up to
/// `iters` power steps until successive estimates differ by less than `tol`.
/// Returns 0 for a zero matrix.
pub fn spectral_norm<T: Scalar>(w: &Mat<T>, iters: usize, tol: T) -> T {
    let (rows, cols) = w.shape();
    if rows == 0 || cols == 0 {
        return T::zero();
    }
    let tall = rows >= cols;
    let gram = if tall {
        w.t_matmul(w).expect("gram shape")
    } else {
        w.matmul_t(w).expect("gram shape")
    };
    let scale = gram.max_abs();
    if scale == T::zero() {
        return T::zero();
    }
    let g = gram.scale(T::one() / scale);
    let n = g.rows();

    let mut p = g.clone();
    for _ in 0..GRAM_SQUARINGS {
        let sq = p.matmul(&p).expect("square");
        let m = sq.max_abs();
        if !(m > T::zero()) || !m.is_finite() {
            break;
        }
        p = sq.scale(T::one() / m);
    }

    let mut v: Vec<T> = Rng::new(SPECTRAL_SEED).normal_vec(n);
    let pv = mat_vec(&p, &v);
    if norm(&pv) > T::zero() {
        v = pv;
    }
    normalize(&mut v);

    let estimate = |v: &[T]| -> T {
        let u = if tall { mat_vec(w, v) } else { mat_t_vec(w, v) };
        norm(&u)
    };

    let mut sigma = estimate(&v);
    for _ in 0..iters.max(1) {
        let mut u = mat_vec(&g, &v);
        if norm(&u) == T::zero() {
            break;
        }
        normalize(&mut u);
        v = u;
        let next = estimate(&v);
        let done = (next - sigma).abs() < tol;
        sigma = next;
        if done {
            break;
        }
    }
    sigma
}

/// `spectral_norm` with the default iteration budget.
pub fn spectral_norm_default<T: Scalar>(w: &Mat<T>) -> T {
    spectral_norm(w, SPECTRAL_ITERS, T::lit(SPECTRAL_TOL))
}

pub fn mat_vec<T: Scalar>(a: &Mat<T>, x: &[T]) -> Vec<T> {
    a.iter_rows().map(|r| super::dot(r, x)).collect()
}

pub fn mat_t_vec<T: Scalar>(a: &Mat<T>, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); a.cols()];
    for (r, &xi) in a.iter_rows().zip(x) {
        for (o, &v) in out.iter_mut().zip(r) {
            *o += v * xi;
        }
    }
    out
}

fn normalize<T: Scalar>(v: &mut [T]) {
    let n = norm(v);
    if n > T::zero() {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Lower-triangular Cholesky factor, or `None` if `a` is not positive definite.
pub fn cholesky<T: Scalar>(a: &Mat<T>) -> Option<Mat<T>> {
    let n = a.rows();
    if a.cols() != n {
        return None;
    }
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse<T: Scalar>(a: &Mat<T>) -> Result<Mat<T>> {
    let n = a.rows();
    let l = cholesky(a).ok_or_else(|| Error::domain("matrix is not positive definite"))?;
    // invert L by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹
    let mut linv = Mat::zeros(n, n);
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { T::one() } else { T::zero() };
            for k in col..i {
                s -= l[(i, k)] * linv[(k, col)];
            }
            linv[(i, col)] = s / l[(i, i)];
        }
    }
    let inv = linv.t_matmul(&linv)?;
    Ok(symmetrize(&inv))
}

pub fn symmetrize<T: Scalar>(a: &Mat<T>) -> Mat<T> {
    let half = T::lit(0.5);
    Mat::from_fn(a.rows(), a.cols(), |i, j| half * (a[(i, j)] + a[(j, i)]))
}

/// Symmetric within `tol` and positive semidefinite up to a relative
/// diagonal shift of `tol`.
pub fn is_psd<T: Scalar>(a: &Mat<T>, tol: T) -> bool {
    if !a.is_symmetric(tol) {
        return false;
    }
    let shift = tol * (T::one() + a.max_abs());
    let mut shifted = a.clone();
    for i in 0..a.rows() {
        shifted[(i, i)] += shift;
    }
    cholesky(&shifted).is_some()
}
