//! Codebook-usage monitoring, the usage regularizer and dead-code resets.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat, Rng};
use crate::scalar::Scalar;

/// Codebook-health snapshot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    /// Smoothed activation rate `p̂_i` per code.
    pub activation_rate: Vec<f64>,
    /// Fraction of codes selected at least once in the window.
    pub utilization: f64,
    pub dead_rate: f64,
    /// Entropy of the windowed assignment histogram, in nats.
    pub entropy: f64,
    pub row_norm_min: f64,
    pub row_norm_max: f64,
    pub sigma_w: f64,
    pub grad_norm_w: f64,
    pub grad_norm_m: f64,
    pub grad_norm_e: f64,
    pub drift: f64,
}

impl UsageStats {
    /// Fills utilization, dead rate and entropy from assignment counts.
    pub fn from_counts(counts: &[u64], activation_rate: Vec<f64>) -> Self {
        let (utilization, entropy) = histogram_summary(counts);
        Self {
            activation_rate,
            utilization,
            dead_rate: 1.0 - utilization,
            entropy,
            ..Self::default()
        }
    }
}

/// `(fraction of nonzero counts, entropy in nats)`; an empty histogram has both zero.
pub fn histogram_summary(counts: &[u64]) -> (f64, f64) {
    if counts.is_empty() {
        return (0.0, 0.0);
    }
    let total: u64 = counts.iter().sum();
    let used = counts.iter().filter(|&&c| c > 0).count();
    let entropy = if total == 0 {
        0.0
    } else {
        let n = total as f64;
        -counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    };
    (used as f64 / counts.len() as f64, entropy.max(0.0))
}

/// Windowed statistics of an assignment stream (each entry is one step's code indices).
pub fn compute_stats(window: &[Vec<usize>], k: usize) -> Result<UsageStats> {
    if window.is_empty() {
        return Err(Error::domain("usage window is empty"));
    }
    let mut counts = vec![0u64; k];
    let mut total = 0usize;
    for step in window {
        for &i in step {
            if i >= k {
                return Err(Error::shape("compute_stats", format!("index < {k}"), i));
            }
            counts[i] += 1;
            total += 1;
        }
    }
    let rates = counts
        .iter()
        .map(|&c| c as f64 / total.max(1) as f64)
        .collect();
    Ok(UsageStats::from_counts(&counts, rates))
}

/// Running activation rates (exponential window) and a ring buffer of recent
/// per-step counts for utilization.
#[derive(Clone, Debug)]
pub struct UsageTracker {
    k: usize,
    decay: f64,
    rates: Vec<f64>,
    window: VecDeque<Vec<u32>>,
    window_len: usize,
    totals: Vec<u64>,
}

impl UsageTracker {
    pub fn new(k: usize, decay: f64, window_len: usize) -> Self {
        Self {
            k,
            decay,
            rates: vec![1.0 / k as f64; k],
            window: VecDeque::with_capacity(window_len),
            window_len: window_len.max(1),
            totals: vec![0; k],
        }
    }

    pub fn observe(&mut self, indices: &[usize]) {
        let mut counts = vec![0u32; self.k];
        for &i in indices {
            counts[i] += 1;
        }
        let n = indices.len().max(1) as f64;
        for (r, &c) in self.rates.iter_mut().zip(&counts) {
            *r = self.decay * *r + (1.0 - self.decay) * (c as f64 / n);
        }
        for (t, &c) in self.totals.iter_mut().zip(&counts) {
            *t += c as u64;
        }
        self.window.push_back(counts);
        if self.window.len() > self.window_len {
            let old = self.window.pop_front().expect("non-empty window");
            for (t, &c) in self.totals.iter_mut().zip(&old) {
                *t -= c as u64;
            }
        }
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Assignment counts summed over the window.
    pub fn window_counts(&self) -> &[u64] {
        &self.totals
    }

    /// Restarts the rate estimate of a code (after a reset).
    pub fn reset_rate(&mut self, i: usize) {
        self.rates[i] = 1.0 / self.k as f64;
    }

    pub fn stats(&self) -> UsageStats {
        UsageStats::from_counts(&self.totals, self.rates.clone())
    }
}

/// `λ Σ max(0, τ − p̂_i)` and its derivative with respect to each `p̂_i`
/// (`−λ` strictly below the threshold, 0 otherwise).
pub fn usage_regularizer(activation_rate: &[f64], lambda_u: f64, tau_u: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = activation_rate
        .iter()
        .map(|&p| {
            if p < tau_u {
                loss += tau_u - p;
                -lambda_u
            } else {
                0.0
            }
        })
        .collect();
    (lambda_u * loss, grad)
}

/// Ring buffer of recent latents.
#[derive(Clone, Debug)]
pub struct Reservoir<T: Scalar> {
    rows: Vec<Vec<T>>,
    capacity: usize,
    next: usize,
}

impl<T: Scalar> Reservoir<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            rows: Vec::new(),
            capacity,
            next: 0,
        }
    }

    pub fn push_batch(&mut self, z: &Mat<T>) {
        if self.capacity == 0 {
            return;
        }
        for r in z.iter_rows() {
            if self.rows.len() < self.capacity {
                self.rows.push(r.to_vec());
            } else {
                self.rows[self.next] = r.to_vec();
            }
            self.next = (self.next + 1) % self.capacity;
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn sample(&self, rng: &mut Rng) -> Option<&[T]> {
        if self.rows.is_empty() {
            None
        } else {
            Some(&self.rows[rng.below(self.rows.len())])
        }
    }
}

/// Replaces every row with `p̂_i < tau_dead` by a reservoir latent plus
/// Gaussian jitter of scale `jitter`. Returns the reset indices.
pub fn dead_code_reset<T: Scalar>(
    e: &mut Mat<T>,
    activation_rate: &[f64],
    tau_dead: f64,
    reservoir: &Reservoir<T>,
    jitter: f64,
    rng: &mut Rng,
) -> Vec<usize> {
    let dead: Vec<usize> = activation_rate
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p < tau_dead)
        .map(|(i, _)| i)
        .collect();
    if dead.is_empty() {
        return dead;
    }
    if reservoir.is_empty() {
        log::warn!(
            "{} dead codes but the latent reservoir is empty; skipping reset",
            dead.len()
        );
        return Vec::new();
    }
    for &i in &dead {
        let src = reservoir.sample(rng).expect("non-empty reservoir").to_vec();
        for (o, s) in e.row_mut(i).iter_mut().zip(src) {
            *o = s + T::lit(jitter * rng.normal());
        }
    }
    dead
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regularizer_examples() {
        assert_eq!(usage_regularizer(&[0.3, 0.3, 0.4], 1.0, 0.25).0, 0.0);
        let (loss, grad) = usage_regularizer(&[0.5, 0.5, 0.0, 0.0], 1.0, 0.25);
        assert_eq!(loss, 0.5);
        assert_eq!(grad, vec![0.0, 0.0, -1.0, -1.0]);
        // subgradient zero at equality
        assert_eq!(usage_regularizer(&[0.25], 1.0, 0.25).1, vec![0.0]);
    }

    #[test]
    fn regularizer_gradient_matches_fd() {
        let rates = [0.1, 0.3, 0.02, 0.6];
        let (_, grad) = usage_regularizer(&rates, 0.7, 0.2);
        let h = 1e-7;
        for i in 0..4 {
            let mut up = rates;
            up[i] += h;
            let mut dn = rates;
            dn[i] -= h;
            let fd = (usage_regularizer(&up, 0.7, 0.2).0 - usage_regularizer(&dn, 0.7, 0.2).0)
                / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn stats_examples() {
        let s = compute_stats(&[vec![2, 2, 2], vec![2]], 4).unwrap();
        assert_eq!(s.utilization, 0.25);
        assert_eq!(s.entropy, 0.0);
        assert_eq!(s.utilization + s.dead_rate, 1.0);
        let s = compute_stats(&[(0..8).collect()], 8).unwrap();
        assert!((s.entropy - 8f64.ln()).abs() < 1e-9);
        assert_eq!(s.utilization, 1.0);
        assert!(compute_stats(&[], 4).is_err());
    }

    #[test]
    fn tracker_window_slides() {
        let mut t = UsageTracker::new(3, 0.99, 2);
        t.observe(&[0]);
        t.observe(&[1]);
        assert_eq!(t.window_counts(), &[1, 1, 0]);
        t.observe(&[1]);
        assert_eq!(t.window_counts(), &[0, 2, 0]);
        let s = t.stats();
        assert!((s.utilization - 1.0 / 3.0).abs() < 1e-15);
        assert!(t.rates()[1] > t.rates()[2]);
    }

    #[test]
    fn reset_replaces_dead_rows_only() {
        let mut e = Mat::from_rows(&[[1.0f64, 1.0], [9.0, 9.0]]).unwrap();
        let mut res = Reservoir::new(4);
        res.push_batch(&Mat::from_rows(&[[0.5, -0.5]]).unwrap());
        let reset = dead_code_reset(&mut e, &[0.5, 0.0], 0.005, &res, 1e-3, &mut Rng::new(1));
        assert_eq!(reset, vec![1]);
        assert_eq!(e.row(0), &[1.0, 1.0]);
        assert!((e[(1, 0)] - 0.5).abs() < 1e-2 && (e[(1, 1)] + 0.5).abs() < 1e-2);
        let before = e.clone();
        assert!(
            dead_code_reset(&mut e, &[0.5, 0.5], 0.005, &res, 1e-3, &mut Rng::new(1)).is_empty()
        );
        assert_eq!(e, before);
        assert!(dead_code_reset(
            &mut e,
            &[0.0, 0.0],
            0.005,
            &Reservoir::new(4),
            1e-3,
            &mut Rng::new(1)
        )
        .is_empty());
        assert_eq!(e, before);
    }

    #[test]
    fn reservoir_is_a_ring() {
        let mut r = Reservoir::<f64>::new(2);
        r.push_batch(&Mat::from_rows(&[[1.0], [2.0], [3.0]]).unwrap());
        assert_eq!(r.len(), 2);
        let mut rng = Rng::new(0);
        for _ in 0..20 {
            let v = r.sample(&mut rng).unwrap()[0];
            assert!(v == 2.0 || v == 3.0);
        }
    }
}
