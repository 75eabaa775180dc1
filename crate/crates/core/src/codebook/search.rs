//! Exact brute-force nearest-neighbor search over the cached codebook.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{dot, Mat};
use crate::scalar::Scalar;

use super::cache::TransformedCache;

/// Batches at least this large (in `B·K·d` multiply-adds) are searched in parallel.
const PARALLEL_WORK: usize = 1 << 18;

/// Nearest transformed codeword for one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<T> {
    pub index: usize,
    pub zhat: Vec<T>,
    /// `δ = ‖ẑ − z‖₂`
    pub gap: T,
    /// Unit `s = (ẑ − z)/δ`, the zero vector when `δ = 0`.
    pub direction: Vec<T>,
    /// `ξ = z − ẑ`
    pub residual: Vec<T>,
    /// Distance to the runner-up codeword minus `δ` (infinite when `K = 1`).
    pub margin: T,
}

impl<T: Scalar> Assignment<T> {
    /// Assignment of `z` to the given codeword.
    pub fn to_code(z: &[T], index: usize, code: &[T]) -> Self {
        let residual: Vec<T> = z.iter().zip(code).map(|(&a, &b)| a - b).collect();
        let gap = residual.iter().map(|&x| x * x).sum::<T>().sqrt();
        let direction = if gap > T::zero() {
            residual.iter().map(|&x| -x / gap).collect()
        } else {
            vec![T::zero(); z.len()]
        };
        Self {
            index,
            zhat: code.to_vec(),
            gap,
            direction,
            residual,
            margin: T::infinity(),
        }
    }
}

/// Exact nearest codeword to `z`, ties broken by the smallest index. Fails
/// when no codeword is at a finite distance (non-finite `z` or codebook).
///
/// Candidates are ranked by `‖c′_i‖² − 2⟨z, c′_i⟩`; candidates within
/// rounding distance of the best are re-ranked by their exact distance.
pub fn nn_query<T: Scalar>(cache: &TransformedCache<T>, z: &[T]) -> Result<Assignment<T>> {
    if z.len() != cache.d() {
        return Err(Error::shape("nn_query", cache.d(), z.len()));
    }
    query(cache, z)
}

fn query<T: Scalar>(cache: &TransformedCache<T>, z: &[T]) -> Result<Assignment<T>> {
    let scores: Vec<T> = cache
        .eprime
        .iter_rows()
        .zip(&cache.sq_norms)
        .map(|(c, &n2)| n2 - T::lit(2.0) * dot(z, c))
        .collect();
    let zz = dot(z, z);
    let best_score = scores.iter().copied().fold(T::infinity(), T::min);
    let slack = T::lit(64.0)
        * T::epsilon()
        * (zz + scores.iter().map(|s| s.abs()).fold(T::zero(), T::max) + T::one());

    let exact = |i: usize| -> T {
        cache
            .eprime
            .row(i)
            .iter()
            .zip(z)
            .map(|(&c, &x)| (x - c) * (x - c))
            .sum()
    };
    let mut best = (usize::MAX, T::infinity());
    for (i, &s) in scores.iter().enumerate() {
        if s <= best_score + slack {
            let d2 = exact(i);
            if d2 < best.1 {
                best = (i, d2);
            }
        }
    }
    if best.0 == usize::MAX {
        return Err(Error::domain("no codeword at a finite distance"));
    }
    let second_d2 = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best.0)
        .map(|(_, &s)| (s + zz).max(T::zero()))
        .fold(T::infinity(), T::min);

    let mut a = Assignment::to_code(z, best.0, cache.eprime.row(best.0));
    a.margin = second_d2.sqrt() - a.gap;
    Ok(a)
}

/// Per-row [`nn_query`]; rows are independent.
pub fn batch_nn<T: Scalar>(cache: &TransformedCache<T>, z: &Mat<T>) -> Result<Vec<Assignment<T>>> {
    if z.cols() != cache.d() {
        return Err(Error::shape("batch_nn", cache.d(), z.cols()));
    }
    let work = z.rows() * cache.k() * cache.d();
    if work >= PARALLEL_WORK {
        (0..z.rows())
            .into_par_iter()
            .map(|i| query(cache, z.row(i)))
            .collect()
    } else {
        z.iter_rows().map(|r| query(cache, r)).collect()
    }
}
