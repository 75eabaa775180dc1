//! Wall-clock scaling of the transform.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codebook::{apply_transform, TransformSpec};
use crate::error::{Error, Result};
use crate::numerics::{least_squares, Mat, Rng};

/// Each timing sample runs the transform repeatedly for at least this long.
const MIN_SAMPLE_SECS: f64 = 5e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub k: usize,
    pub d: usize,
    pub r: usize,
    /// Seconds per transform, minimum over repeats.
    pub min_secs: f64,
    pub mean_secs: f64,
    pub std_secs: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// `min_secs[i+1] / min_secs[i]`.
    pub ratios: Vec<f64>,
    /// Least-squares `time ≈ slope·x + intercept` over the varied size.
    pub slope: f64,
    pub intercept: f64,
}

/// Times `apply_transform` for a linear low-rank transform at each `K`.
pub fn bench_transform_scaling(
    ks: &[usize],
    d: usize,
    r: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if ks.is_empty() || ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "K list must be non-empty and increasing".into(),
        ));
    }
    let shapes: Vec<(usize, usize, usize)> = ks.iter().map(|&k| (k, d, r.min(k).min(d))).collect();
    Ok(report(time_all(&shapes, repeats, seed)?, |row| {
        row.k as f64
    }))
}

/// Times `apply_transform` at fixed `K` for each rank.
pub fn bench_rank_scaling(
    k: usize,
    d: usize,
    ranks: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if ranks.is_empty() || ranks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "rank list must be non-empty and increasing".into(),
        ));
    }
    let shapes: Vec<(usize, usize, usize)> = ranks.iter().map(|&r| (k, d, r)).collect();
    Ok(report(time_all(&shapes, repeats, seed)?, |row| {
        row.r as f64
    }))
}

struct Case {
    e: Mat<f64>,
    spec: TransformSpec<f64>,
    inner: usize,
}

impl Case {
    fn new(k: usize, d: usize, r: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed).fork(k as u64);
        let e: Mat<f64> = rng.normal_mat(k, d);
        let spec = TransformSpec::linear_low_rank(
            rng.normal_mat(k, r),
            rng.normal_mat(k, r),
            rng.normal_mat(d, d),
        );
        spec.validate(k, d)?;
        let mut case = Self { e, spec, inner: 1 };
        // calibrate the inner loop so one sample is long enough to time reliably
        while case.sample()? * (case.inner as f64) < MIN_SAMPLE_SECS && case.inner < 1 << 20 {
            case.inner *= 2;
        }
        Ok(case)
    }

    /// Seconds per transform, averaged over the inner loop.
    fn sample(&self) -> Result<f64> {
        let t = Instant::now();
        for _ in 0..self.inner {
            black_box(apply_transform(&self.spec, black_box(&self.e))?);
        }
        Ok(t.elapsed().as_secs_f64() / self.inner as f64)
    }
}

/// Samples every shape once per round, so a slow stretch of the machine
/// affects all sizes alike instead of skewing one ratio.
fn time_all(shapes: &[(usize, usize, usize)], repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let cases = shapes
        .iter()
        .map(|&(k, d, r)| Case::new(k, d, r, seed))
        .collect::<Result<Vec<_>>>()?;
    let repeats = repeats.max(1);
    let mut samples = vec![Vec::with_capacity(repeats); cases.len()];
    for _ in 0..repeats {
        for (case, out) in cases.iter().zip(&mut samples) {
            out.push(case.sample()?);
        }
    }
    Ok(shapes
        .iter()
        .zip(&samples)
        .map(|(&(k, d, r), s)| {
            let (mean, std) = super::compare::mean_std(s);
            BenchRow {
                k,
                d,
                r,
                min_secs: s.iter().copied().fold(f64::INFINITY, f64::min),
                mean_secs: mean,
                std_secs: std,
                repeats,
            }
        })
        .collect())
}

fn report(rows: Vec<BenchRow>, x: impl Fn(&BenchRow) -> f64) -> BenchReport {
    let ratios = rows
        .windows(2)
        .map(|w| w[1].min_secs / w[0].min_secs)
        .collect();
    let xs: Vec<f64> = rows.iter().map(&x).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.min_secs).collect();
    let (slope, intercept) = least_squares(&xs, &ys);
    BenchReport {
        rows,
        ratios,
        slope,
        intercept,
    }
}
