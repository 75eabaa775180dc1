//! Cached transformed codebook used for nearest-neighbor search.

use crate::error::Result;
use crate::numerics::Mat;
use crate::scalar::Scalar;

use super::init::CodebookState;
use super::transform::{apply_transform, TransformSpec};

/// `E′` with precomputed squared row norms, stamped with the step it was built at.
#[derive(Clone, Debug)]
pub struct TransformedCache<T: Scalar> {
    pub eprime: Mat<T>,
    pub sq_norms: Vec<T>,
    pub step_stamp: usize,
    /// `E′` of the refresh this cache replaced.
    pub prev_eprime: Option<Mat<T>>,
}

impl<T: Scalar> TransformedCache<T> {
    /// Cache over an explicit transformed codebook.
    pub fn from_eprime(eprime: Mat<T>, step: usize) -> Self {
        let sq_norms = eprime
            .iter_rows()
            .map(|r| r.iter().map(|&x| x * x).sum())
            .collect();
        Self {
            eprime,
            sq_norms,
            step_stamp: step,
            prev_eprime: None,
        }
    }

    pub fn k(&self) -> usize {
        self.eprime.rows()
    }

    pub fn d(&self) -> usize {
        self.eprime.cols()
    }

    /// `‖E′_t − E′_prev‖_F`, zero for a first build.
    pub fn drift(&self) -> T {
        match &self.prev_eprime {
            Some(prev) => self
                .eprime
                .sub(prev)
                .map(|m| m.frobenius())
                .unwrap_or_else(|_| T::nan()),
            None => T::zero(),
        }
    }
}

/// Rebuilds `E′` from the current parameters, keeping the previous `E′` for drift.
pub fn refresh_cache<T: Scalar>(
    state: &CodebookState<T>,
    spec: &TransformSpec<T>,
    step: usize,
    old: Option<&TransformedCache<T>>,
) -> Result<TransformedCache<T>> {
    let eprime = apply_transform(spec, &state.e)?;
    let mut cache = TransformedCache::from_eprime(eprime, step);
    cache.prev_eprime = old.map(|c| c.eprime.clone());
    Ok(cache)
}
