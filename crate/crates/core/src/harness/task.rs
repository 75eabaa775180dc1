//! Synthetic tasks: Gaussian mixtures quantized directly or through a linear autoencoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Mat, Rng};
use crate::scalar::Scalar;

/// Isotropic Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub means: Vec<Vec<f64>>,
    /// Per-coordinate standard deviation shared by every component.
    pub scale: f64,
    pub weights: Vec<f64>,
}

impl GmmSpec {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let d = self.dim();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::Config(
                "mixture means must share a positive dimension".into(),
            ));
        }
        if self.weights.len() != self.means.len() {
            return Err(Error::Config(format!(
                "{} weights for {} components",
                self.weights.len(),
                self.means.len()
            )));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0))
            || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::Config(
                "mixture weights must be non-negative and sum to 1".into(),
            ));
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::Config(format!(
                "mixture scale must be non-negative, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Smallest distance between two component means (infinite for one component).
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.means.len() {
            for j in i + 1..self.means.len() {
                best = best.min(sq_dist(&self.means[i], &self.means[j]).sqrt());
            }
        }
        best
    }

    /// `components` means drawn `N(0, spread²I)` in `d` dimensions, resampled
    /// until every pair is at least `min_sep` apart, with uniform weights.
    pub fn random(
        components: usize,
        d: usize,
        spread: f64,
        scale: f64,
        min_sep: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(components);
        while means.len() < components {
            let m: Vec<f64> = (0..d).map(|_| spread * rng.normal()).collect();
            if means.iter().all(|o| sq_dist(o, &m).sqrt() >= min_sep) {
                means.push(m);
            }
        }
        Self {
            means,
            scale,
            weights: vec![1.0 / components as f64; components],
        }
    }
}

/// How the quantizer sees the data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Quantize the mixture samples themselves.
    #[default]
    GmmDirect,
    /// Encode with `W_e: D → d`, quantize, decode with `W_d: d → D`.
    LinearAE,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub gmm: GmmSpec,
    /// Dimension of the mixture samples.
    pub ambient_dim: usize,
    /// Dimension of the quantized latents (equals `ambient_dim` for direct tasks).
    pub latent_dim: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        self.gmm.validate()?;
        if self.gmm.dim() != self.ambient_dim {
            return Err(Error::Config(format!(
                "mixture dimension {} differs from ambient_dim {}",
                self.gmm.dim(),
                self.ambient_dim
            )));
        }
        if self.kind == TaskKind::GmmDirect && self.latent_dim != self.ambient_dim {
            return Err(Error::Config(
                "direct tasks need latent_dim == ambient_dim".into(),
            ));
        }
        if self.latent_dim == 0 || self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config(
                "latent_dim, n_train and n_eval must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Train and eval samples, drawn from independent streams of the task seed.
    pub fn generate<T: Scalar>(&self) -> Result<(Mat<T>, Mat<T>)> {
        self.validate()?;
        let root = Rng::new(self.seed);
        let train = gen_gmm(&self.gmm, self.n_train, &mut root.fork(1));
        let eval = gen_gmm(&self.gmm, self.n_eval, &mut root.fork(2));
        Ok((train, eval))
    }

    /// Eight well-separated components in 16 dimensions.
    pub fn well_separated(seed: u64) -> Self {
        let gmm = GmmSpec::random(8, 16, 0.4, 0.05, 0.5, &mut Rng::new(seed).fork(0));
        Self {
            kind: TaskKind::GmmDirect,
            gmm,
            ambient_dim: 16,
            latent_dim: 16,
            n_train: 8192,
            n_eval: 2048,
            seed,
        }
    }

    /// Eight components in 16 dimensions, meant for large codebooks initialized
    /// around a single component.
    pub fn collapse_prone(seed: u64) -> Self {
        let gmm = GmmSpec::random(8, 16, 0.25, 0.05, 0.2, &mut Rng::new(seed).fork(0));
        Self {
            kind: TaskKind::GmmDirect,
            gmm,
            ambient_dim: 16,
            latent_dim: 16,
            n_train: 8192,
            n_eval: 2048,
            seed,
        }
    }

    /// Linear-autoencoder variant: 32-dimensional mixture, 8-dimensional latents.
    pub fn linear_ae(seed: u64) -> Self {
        let gmm = GmmSpec::random(8, 32, 0.25, 0.05, 0.3, &mut Rng::new(seed).fork(0));
        Self {
            kind: TaskKind::LinearAE,
            gmm,
            ambient_dim: 32,
            latent_dim: 8,
            n_train: 8192,
            n_eval: 2048,
            seed,
        }
    }
}

/// `n` i.i.d. mixture samples, one per row.
pub fn gen_gmm<T: Scalar>(gmm: &GmmSpec, n: usize, rng: &mut Rng) -> Mat<T> {
    let d = gmm.dim();
    let mut out = Mat::zeros(n, d);
    for p in 0..n {
        let c = rng.weighted_index(&gmm.weights).unwrap_or(0);
        let row = out.row_mut(p);
        for (o, &m) in row.iter_mut().zip(&gmm.means[c]) {
            *o = T::lit(m + gmm.scale * rng.normal());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_single_component() {
        let gmm = GmmSpec {
            means: vec![vec![0.0, 0.0]],
            scale: 0.0,
            weights: vec![1.0],
        };
        let x: Mat<f64> = gen_gmm(&gmm, 5, &mut Rng::new(0));
        assert!(x.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_components_recover_means() {
        let gmm = GmmSpec {
            means: vec![vec![5.0, 0.0], vec![-5.0, 0.0]],
            scale: 1.0,
            weights: vec![0.5, 0.5],
        };
        let x: Mat<f64> = gen_gmm(&gmm, 10_000, &mut Rng::new(3));
        for centre in [5.0, -5.0] {
            let rows: Vec<&[f64]> = x
                .iter_rows()
                .filter(|r| (r[0] - centre).abs() < 5.0)
                .collect();
            let m0 = rows.iter().map(|r| r[0]).sum::<f64>() / rows.len() as f64;
            let m1 = rows.iter().map(|r| r[1]).sum::<f64>() / rows.len() as f64;
            assert!((m0 - centre).abs() < 0.1 && m1.abs() < 0.1, "{m0} {m1}");
        }
        let y: Mat<f64> = gen_gmm(&gmm, 10_000, &mut Rng::new(3));
        assert_eq!(x, y);
    }

    #[test]
    fn presets_are_valid() {
        for t in [
            SyntheticTask::well_separated(1),
            SyntheticTask::collapse_prone(1),
            SyntheticTask::linear_ae(1),
        ] {
            t.validate().unwrap();
            assert!((t.gmm.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let ws = SyntheticTask::well_separated(5);
        assert!(ws.gmm.min_separation() >= 2.0 * ws.gmm.scale);
    }

    #[test]
    fn rejects_bad_weights() {
        let mut t = SyntheticTask::well_separated(0);
        t.gmm.weights[0] += 0.1;
        assert!(t.validate().is_err());
    }
}
