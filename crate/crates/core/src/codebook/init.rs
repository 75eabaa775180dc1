//! Raw codebook state and its initialization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Mat, Rng};
use crate::scalar::Scalar;

/// Raw codebook `E` with one codeword per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct CodebookState<T: Scalar> {
    pub e: Mat<T>,
}

impl<T: Scalar> CodebookState<T> {
    pub fn new(e: Mat<T>) -> Result<Self> {
        if e.rows() < 2 || e.cols() == 0 {
            return Err(Error::domain(format!(
                "codebook needs K >= 2 and d >= 1, got {}x{}",
                e.rows(),
                e.cols()
            )));
        }
        if !e.is_finite() {
            return Err(Error::domain("codebook has non-finite entries"));
        }
        Ok(Self { e })
    }

    pub fn k(&self) -> usize {
        self.e.rows()
    }

    pub fn d(&self) -> usize {
        self.e.cols()
    }

    /// Smallest pairwise distance between rows.
    pub fn min_pairwise_distance(&self) -> T {
        let mut best = T::infinity();
        for i in 0..self.k() {
            for j in i + 1..self.k() {
                best = best.min(sq_dist(self.e.row(i), self.e.row(j)));
            }
        }
        best.sqrt()
    }
}

/// Initialization strategy for the raw codebook.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CodebookInit {
    /// Standard normal rows, then normalized to unit length.
    Gaussian,
    /// k-means++ seeding and Lloyd iterations on warmup latents.
    KMeans { iters: usize },
    /// Unit-norm Gaussian directions scaled by `spread` around the first
    /// mixture component mean (used to provoke collapse).
    Concentrated { spread: f64 },
}

/// `K` i.i.d. standard normal rows, each normalized to unit length.
pub fn init_gaussian<T: Scalar>(k: usize, d: usize, rng: &mut Rng) -> Result<CodebookState<T>> {
    let mut e = rng.normal_mat::<T>(k, d);
    e.normalize_rows();
    CodebookState::new(e)
}

/// Codebook set to k-means centers of `warmup`.
pub fn init_kmeans<T: Scalar>(
    k: usize,
    warmup: &Mat<T>,
    iters: usize,
    rng: &mut Rng,
) -> Result<CodebookState<T>> {
    CodebookState::new(kmeans(warmup, k, iters, rng)?.centers)
}

/// Result of [`kmeans`].
#[derive(Clone, Debug)]
pub struct KMeans<T: Scalar> {
    pub centers: Mat<T>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each assignment pass.
    pub sse_history: Vec<T>,
}

impl<T: Scalar> KMeans<T> {
    pub fn sse(&self) -> T {
        *self.sse_history.last().expect("at least one pass")
    }
}

/// k-means++ seeding followed by up to `iters` Lloyd iterations. Empty
/// clusters are re-seeded with the point farthest from its center.
pub fn kmeans<T: Scalar>(
    points: &Mat<T>,
    k: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<KMeans<T>> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::domain("k-means needs k >= 1"));
    }
    if n < k {
        return Err(Error::domain(format!(
            "k-means needs at least {k} points, got {n}"
        )));
    }
    let mut centers = seed_plus_plus(points, k, rng)?;
    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![T::zero(); n];
    let mut sse_history = Vec::new();

    for it in 0..=iters {
        let mut changed = false;
        for i in 0..n {
            let (j, dist) = nearest(&centers, points.row(i));
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
            dists[i] = dist;
        }
        sse_history.push(dists.iter().copied().sum());
        if (!changed && it > 0) || it == iters {
            break;
        }
        let d = points.cols();
        let mut sums: Mat<T> = Mat::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &j) in assignments.iter().enumerate() {
            counts[j] += 1;
            for (s, &x) in sums.row_mut(j).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                let c = T::lit(counts[j] as f64);
                let row: Vec<T> = sums.row(j).iter().map(|&s| s / c).collect();
                centers.set_row(j, &row);
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| {
                        dists[a]
                            .partial_cmp(&dists[b])
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .expect("n >= k");
                taken[far] = true;
                dists[far] = T::zero();
                centers.set_row(j, points.row(far));
            }
        }
    }
    Ok(KMeans {
        centers,
        assignments,
        sse_history,
    })
}

fn nearest<T: Scalar>(centers: &Mat<T>, x: &[T]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centers.iter_rows().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus<T: Scalar>(points: &Mat<T>, k: usize, rng: &mut Rng) -> Result<Mat<T>> {
    let n = points.rows();
    let mut centers = Mat::zeros(k, points.cols());
    let first = rng.below(n);
    centers.set_row(0, points.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(first)).as_f64())
        .collect();
    for j in 1..k {
        let pick = rng
            .weighted_index(&d2)
            .ok_or_else(|| Error::domain(format!("fewer than {k} distinct warmup points")))?;
        centers.set_row(j, points.row(pick));
        for (i, dist) in d2.iter_mut().enumerate() {
            *dist = dist.min(sq_dist(points.row(i), points.row(pick)).as_f64());
        }
    }
    Ok(centers)
}
