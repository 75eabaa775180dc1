//! Integrated codebook transforms `E′ = f(E)` and spectral clipping of `W`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, spd_inverse, spectral_norm_default, Mat, Rng};
use crate::scalar::Scalar;

pub const DEFAULT_RANK: usize = 32;
pub const DEFAULT_TOP_K: usize = 16;
pub const DEFAULT_TEMP: f64 = 1.0;
pub const DEFAULT_TAU_W: f64 = 1.75;
pub const DEFAULT_NORM_TEMP: f64 = 1e-2;

/// Largest codebook for which the dense `K × K` mixer may be materialized.
pub const DENSE_MIXER_MAX_K: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransformKind {
    Identity,
    LinearLowRank,
    AttentionTopK,
    LowRankNormalized,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::Identity,
        TransformKind::LinearLowRank,
        TransformKind::AttentionTopK,
        TransformKind::LowRankNormalized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "Identity",
            TransformKind::LinearLowRank => "LinearLowRank",
            TransformKind::AttentionTopK => "AttentionTopK",
            TransformKind::LowRankNormalized => "LowRankNormalized",
        }
    }

    /// Uses the low-rank mixer `M = ABᵀ`.
    pub fn is_low_rank(self) -> bool {
        matches!(
            self,
            TransformKind::LinearLowRank | TransformKind::LowRankNormalized
        )
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown transform kind `{s}`")))
    }
}

/// Transform parameters. Matrices a kind does not use are stored as `0 × 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    deny_unknown_fields,
    bound(serialize = "T: Scalar", deserialize = "T: Scalar")
)]
pub struct TransformSpec<T: Scalar> {
    pub kind: TransformKind,
    /// Mixer factor, `K × r`.
    pub a: Mat<T>,
    /// Mixer factor, `K × r`.
    pub b: Mat<T>,
    /// Feature transform, `d × d`.
    pub w: Mat<T>,
    /// Attention query projection, `d × ds`.
    pub u1: Mat<T>,
    /// Attention key projection, `d × ds`.
    pub v1: Mat<T>,
    /// Neighbours kept per attention row.
    pub k: usize,
    /// Attention softmax temperature.
    pub temp: T,
    /// Smoothing constant of the low-rank normalized row scaling.
    pub norm_temp: T,
    /// Spectral cap applied to `W` after each update.
    pub tau_w: T,
    /// Normalize every row of `E′` to unit length.
    pub row_normalize: bool,
}

impl<T: Scalar> TransformSpec<T> {
    fn base(kind: TransformKind) -> Self {
        Self {
            kind,
            a: Mat::zeros(0, 0),
            b: Mat::zeros(0, 0),
            w: Mat::zeros(0, 0),
            u1: Mat::zeros(0, 0),
            v1: Mat::zeros(0, 0),
            k: 0,
            temp: T::lit(DEFAULT_TEMP),
            norm_temp: T::lit(DEFAULT_NORM_TEMP),
            tau_w: T::lit(DEFAULT_TAU_W),
            row_normalize: false,
        }
    }

    pub fn identity() -> Self {
        Self::base(TransformKind::Identity)
    }

    pub fn linear_low_rank(a: Mat<T>, b: Mat<T>, w: Mat<T>) -> Self {
        Self {
            a,
            b,
            w,
            ..Self::base(TransformKind::LinearLowRank)
        }
    }

    pub fn low_rank_normalized(a: Mat<T>, b: Mat<T>, w: Mat<T>) -> Self {
        Self {
            a,
            b,
            w,
            ..Self::base(TransformKind::LowRankNormalized)
        }
    }

    pub fn attention_top_k(u1: Mat<T>, v1: Mat<T>, w: Mat<T>, k: usize, temp: T) -> Self {
        Self {
            u1,
            v1,
            w,
            k,
            temp,
            ..Self::base(TransformKind::AttentionTopK)
        }
    }

    pub fn with_row_normalize(mut self, on: bool) -> Self {
        self.row_normalize = on;
        self
    }

    pub fn with_tau_w(mut self, tau_w: T) -> Self {
        self.tau_w = tau_w;
        self
    }

    /// Mixer rank `r` (0 for kinds without a low-rank mixer).
    pub fn rank(&self) -> usize {
        if self.kind.is_low_rank() {
            self.a.cols()
        } else {
            0
        }
    }

    pub fn has_w(&self) -> bool {
        self.kind != TransformKind::Identity
    }

    /// Checks the spec against a `K × d` codebook.
    pub fn validate(&self, k: usize, d: usize) -> Result<()> {
        if !(self.tau_w.is_finite() && self.tau_w > T::zero()) {
            return Err(Error::domain(format!(
                "tau_w must be positive, got {}",
                self.tau_w
            )));
        }
        let expect = |name: &'static str, m: &Mat<T>, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::shape(
                    name,
                    format!("{}x{}", shape.0, shape.1),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
            if !m.is_finite() {
                return Err(Error::domain(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        match self.kind {
            TransformKind::Identity => Ok(()),
            TransformKind::LinearLowRank | TransformKind::LowRankNormalized => {
                let r = self.a.cols();
                if r == 0 {
                    return Err(Error::domain("rank must be at least 1"));
                }
                if self.kind == TransformKind::LinearLowRank && r > k.min(d) {
                    return Err(Error::domain(format!(
                        "rank {r} exceeds min(K, d) = {}",
                        k.min(d)
                    )));
                }
                if self.kind == TransformKind::LowRankNormalized
                    && !(self.norm_temp.is_finite() && self.norm_temp > T::zero())
                {
                    return Err(Error::domain("norm_temp must be positive"));
                }
                expect("transform A", &self.a, (k, r))?;
                expect("transform B", &self.b, (k, r))?;
                expect("transform W", &self.w, (d, d))
            }
            TransformKind::AttentionTopK => {
                if self.k == 0 || self.k > k {
                    return Err(Error::domain(format!(
                        "top-k must lie in 1..={k}, got {}",
                        self.k
                    )));
                }
                if !(self.temp.is_finite() && self.temp > T::zero()) {
                    return Err(Error::domain("attention temp must be positive"));
                }
                let ds = self.u1.cols();
                if ds == 0 {
                    return Err(Error::domain(
                        "attention score dimension must be at least 1",
                    ));
                }
                expect("transform U1", &self.u1, (d, ds))?;
                expect("transform V1", &self.v1, (d, ds))?;
                expect("transform W", &self.w, (d, d))
            }
        }
    }

    /// Materialized `M = ABᵀ` (low-rank kinds only).
    pub fn mixer_dense(&self) -> Result<Mat<T>> {
        if !self.kind.is_low_rank() {
            return Err(Error::domain(format!(
                "{} has no low-rank mixer",
                self.kind
            )));
        }
        self.a.matmul_t(&self.b)
    }
}

/// How transform parameters are initialized for a given raw codebook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TransformInit {
    /// Chosen so that the initial `E′` reproduces `E` as closely as the rank allows.
    #[default]
    Aligned,
    /// Scaled Gaussian factors and `W = I`.
    Random,
}

/// Hyperparameters used to build a [`TransformSpec`] for a codebook.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    pub kind: TransformKind,
    pub rank: usize,
    pub k: usize,
    pub temp: f64,
    pub score_dim: usize,
    pub norm_temp: f64,
    pub tau_w: f64,
    pub row_normalize: bool,
    pub init: TransformInit,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            kind: TransformKind::LinearLowRank,
            rank: DEFAULT_RANK,
            k: DEFAULT_TOP_K,
            temp: DEFAULT_TEMP,
            score_dim: 8,
            norm_temp: DEFAULT_NORM_TEMP,
            tau_w: DEFAULT_TAU_W,
            row_normalize: false,
            init: TransformInit::Aligned,
        }
    }
}

impl TransformConfig {
    pub fn identity() -> Self {
        Self {
            kind: TransformKind::Identity,
            ..Self::default()
        }
    }

    pub fn build<T: Scalar>(&self, e: &Mat<T>, rng: &mut Rng) -> Result<TransformSpec<T>> {
        self.build_toward(e, e, rng)
    }

    /// Like [`build`](Self::build), but aligned low-rank factors reproduce
    /// `target` instead of `e` (as closely as the rank allows), so the initial
    /// transformed codebook can differ from the raw one. Other kinds ignore
    /// `target`.
    pub fn build_toward<T: Scalar>(
        &self,
        e: &Mat<T>,
        target: &Mat<T>,
        rng: &mut Rng,
    ) -> Result<TransformSpec<T>> {
        let (k, d) = e.shape();
        if target.shape() != e.shape() {
            return Err(Error::shape(
                "TransformConfig::build_toward",
                format!("{:?}", e.shape()),
                format!("{:?}", target.shape()),
            ));
        }
        let mut spec = match self.kind {
            TransformKind::Identity => TransformSpec::identity(),
            TransformKind::LinearLowRank | TransformKind::LowRankNormalized => {
                let r = self.rank.min(k).min(d).max(1);
                let (a, b) = match self.init {
                    TransformInit::Aligned => aligned_factors(e, target, r, rng)?,
                    TransformInit::Random => random_factors(k, r, rng),
                };
                let mut s = if self.kind == TransformKind::LinearLowRank {
                    TransformSpec::linear_low_rank(a, b, Mat::identity(d))
                } else {
                    TransformSpec::low_rank_normalized(a, b, Mat::identity(d))
                };
                s.norm_temp = T::lit(self.norm_temp);
                s
            }
            TransformKind::AttentionTopK => {
                let ds = self.score_dim.max(1);
                let scale = T::lit(1.0 / (d as f64).sqrt());
                let u1 = rng.normal_mat::<T>(d, ds).scale(scale);
                let v1 = rng.normal_mat::<T>(d, ds).scale(scale);
                TransformSpec::attention_top_k(
                    u1,
                    v1,
                    Mat::identity(d),
                    self.k.clamp(1, k),
                    T::lit(self.temp),
                )
            }
        };
        spec.tau_w = T::lit(self.tau_w);
        spec.row_normalize = self.row_normalize;
        spec.validate(k, d)?;
        Ok(spec)
    }
}

/// Gaussian factors scaled so that `ME` has rows of roughly the size of `E`'s.
fn random_factors<T: Scalar>(k: usize, r: usize, rng: &mut Rng) -> (Mat<T>, Mat<T>) {
    let s = T::lit(((k * r) as f64).powf(-0.25));
    (
        rng.normal_mat::<T>(k, r).scale(s),
        rng.normal_mat::<T>(k, r).scale(s),
    )
}

/// `A = T P`, `B = E (EᵀE)⁻¹ P` with `P` spanning the top-`r` right singular
/// subspace of the target `T`, so that `ABᵀE = T P Pᵀ` (exactly `T` when `r = d`).
fn aligned_factors<T: Scalar>(
    e: &Mat<T>,
    target: &Mat<T>,
    r: usize,
    rng: &mut Rng,
) -> Result<(Mat<T>, Mat<T>)> {
    let d = e.cols();
    let mut gram = e.t_matmul(e)?;
    let ridge = T::lit(1e-10) * (T::one() + gram.max_abs());
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let p = if r == d {
        Mat::identity(d)
    } else {
        top_subspace(&target.t_matmul(target)?, r, rng)
    };
    let a = target.matmul(&p)?;
    let b = e.matmul(&spd_inverse(&gram)?)?.matmul(&p)?;
    Ok((a, b))
}

/// Orthonormal basis of the dominant `r`-dimensional invariant subspace of a
/// symmetric PSD matrix, by subspace iteration.
fn top_subspace<T: Scalar>(s: &Mat<T>, r: usize, rng: &mut Rng) -> Mat<T> {
    let n = s.rows();
    let mut q: Mat<T> = rng.normal_mat(n, r);
    orthonormalize_cols(&mut q);
    for _ in 0..300 {
        q = s.matmul(&q).expect("square times tall");
        orthonormalize_cols(&mut q);
    }
    q
}

/// Modified Gram-Schmidt on the columns of `q`.
fn orthonormalize_cols<T: Scalar>(q: &mut Mat<T>) {
    let (n, r) = q.shape();
    for j in 0..r {
        for prev in 0..j {
            let proj: T = (0..n).map(|i| q[(i, j)] * q[(i, prev)]).sum();
            for i in 0..n {
                let v = q[(i, prev)];
                q[(i, j)] -= proj * v;
            }
        }
        let nrm: T = (0..n).map(|i| q[(i, j)] * q[(i, j)]).sum::<T>().sqrt();
        if nrm > T::zero() {
            for i in 0..n {
                q[(i, j)] /= nrm;
            }
        }
    }
}

/// Sparse row-stochastic attention mixer with the scores it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKMixer<T: Scalar> {
    pub k: usize,
    /// Row-major `K × k` neighbour indices.
    pub idx: Vec<usize>,
    /// Row-major `K × k` softmax weights matching `idx`.
    pub weights: Vec<T>,
    /// `P = E U1`
    pub p: Mat<T>,
    /// `Q = E V1`
    pub q: Mat<T>,
}

impl<T: Scalar> TopKMixer<T> {
    pub fn row_idx(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }

    pub fn row_weights(&self, i: usize) -> &[T] {
        &self.weights[i * self.k..(i + 1) * self.k]
    }

    pub fn n_rows(&self) -> usize {
        self.p.rows()
    }

    /// `Σ_j α_ij X_j` for every row `i`.
    pub fn apply(&self, x: &Mat<T>) -> Mat<T> {
        let mut out = Mat::zeros(self.n_rows(), x.cols());
        for i in 0..self.n_rows() {
            let (idx, wts) = (self.row_idx(i), self.row_weights(i));
            let row = out.row_mut(i);
            for (&j, &w) in idx.iter().zip(wts) {
                for (o, &v) in row.iter_mut().zip(x.row(j)) {
                    *o += w * v;
                }
            }
        }
        out
    }

    /// Dense `K × K` mixer, only for `K ≤ DENSE_MIXER_MAX_K`.
    pub fn to_dense(&self) -> Result<Mat<T>> {
        let k = self.n_rows();
        if k > DENSE_MIXER_MAX_K {
            return Err(Error::domain(format!(
                "dense mixer limited to K <= {DENSE_MIXER_MAX_K}, got {k}"
            )));
        }
        let mut m = Mat::zeros(k, k);
        for i in 0..k {
            for (&j, &w) in self.row_idx(i).iter().zip(self.row_weights(i)) {
                m[(i, j)] += w;
            }
        }
        Ok(m)
    }
}

/// Builds the attention mixer: per row, the `k` largest scores
/// `⟨P_i, Q_j⟩ / temp` (ties to the smaller index) and a softmax over them.
pub fn build_top_k<T: Scalar>(e: &Mat<T>, spec: &TransformSpec<T>) -> Result<TopKMixer<T>> {
    let p = e.matmul(&spec.u1)?;
    let q = e.matmul(&spec.v1)?;
    let n = e.rows();
    let k = spec.k;
    let mut idx = Vec::with_capacity(n * k);
    let mut weights = Vec::with_capacity(n * k);
    let mut scored: Vec<(T, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        scored.clear();
        let pi = p.row(i);
        scored.extend((0..n).map(|j| (dot(pi, q.row(j)) / spec.temp, j)));
        let by_rank = |x: &(T, usize), y: &(T, usize)| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(x.1.cmp(&y.1))
        };
        if k < n {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        let top = scored[0].0;
        let exps: Vec<T> = scored.iter().map(|&(s, _)| (s - top).exp()).collect();
        let total: T = exps.iter().copied().sum();
        for (&(_, j), &x) in scored.iter().zip(&exps) {
            idx.push(j);
            weights.push(x / total);
        }
    }
    Ok(TopKMixer {
        k,
        idx,
        weights,
        p,
        q,
    })
}

/// Forward pass of a transform with the intermediates its backward needs.
#[derive(Clone, Debug)]
pub struct TransformForward<T: Scalar> {
    /// Final transformed codebook `E′`.
    pub out: Mat<T>,
    /// `BᵀE` (low-rank kinds).
    pub bte: Option<Mat<T>>,
    /// Mixed codebook before the smooth normalization (`A(BᵀE)`, low-rank normalized).
    pub mixed: Option<Mat<T>>,
    /// `√(‖x_i‖² + t²)` per row of `mixed`.
    pub smooth_scale: Vec<T>,
    /// Input to `W` (`ME`, its normalized version, or the attention output).
    pub pre_w: Mat<T>,
    /// Rows before the optional final normalization.
    pub pre_norm: Mat<T>,
    /// Norms of `pre_norm` rows when the final normalization is on.
    pub pre_norm_norms: Vec<T>,
    pub mixer: Option<TopKMixer<T>>,
}

/// `E′` for the given transform.
pub fn apply_transform<T: Scalar>(spec: &TransformSpec<T>, e: &Mat<T>) -> Result<Mat<T>> {
    Ok(transform_forward(spec, e)?.out)
}

pub fn transform_forward<T: Scalar>(
    spec: &TransformSpec<T>,
    e: &Mat<T>,
) -> Result<TransformForward<T>> {
    let (k, d) = e.shape();
    spec.validate(k, d)?;
    let mut bte = None;
    let mut mixed = None;
    let mut smooth_scale = Vec::new();
    let mut mixer = None;
    let pre_w = match spec.kind {
        TransformKind::Identity => e.clone(),
        TransformKind::LinearLowRank => {
            let t1 = spec.b.t_matmul(e)?;
            let me = spec.a.matmul(&t1)?;
            bte = Some(t1);
            me
        }
        TransformKind::LowRankNormalized => {
            let t1 = spec.b.t_matmul(e)?;
            let me = spec.a.matmul(&t1)?;
            let t2 = spec.norm_temp * spec.norm_temp;
            let mut normed = me.clone();
            for i in 0..k {
                let row = normed.row_mut(i);
                let sigma = (row.iter().map(|&x| x * x).sum::<T>() + t2).sqrt();
                row.iter_mut().for_each(|x| *x /= sigma);
                smooth_scale.push(sigma);
            }
            bte = Some(t1);
            mixed = Some(me);
            normed
        }
        TransformKind::AttentionTopK => {
            let m = build_top_k(e, spec)?;
            let out = m.apply(e);
            mixer = Some(m);
            out
        }
    };
    let pre_norm = if spec.has_w() {
        pre_w.matmul(&spec.w)?
    } else {
        pre_w.clone()
    };
    let mut out = pre_norm.clone();
    let mut pre_norm_norms = Vec::new();
    if spec.row_normalize {
        pre_norm_norms = pre_norm.row_norms();
        out.normalize_rows();
    }
    Ok(TransformForward {
        out,
        bte,
        mixed,
        smooth_scale,
        pre_w,
        pre_norm,
        pre_norm_norms,
        mixer,
    })
}

/// Rescales `w` so that `σmax(w) ≤ tau_w`; returns `w` unchanged when already within the cap.
pub fn spectral_clip<T: Scalar>(w: &Mat<T>, tau_w: T) -> Mat<T> {
    let mut out = w.clone();
    clip_in_place(&mut out, tau_w);
    out
}

/// In-place [`spectral_clip`]; returns the pre-clip `σmax` when a rescale happened.
pub fn clip_in_place<T: Scalar>(w: &mut Mat<T>, tau_w: T) -> Option<T> {
    let sigma = spectral_norm_default(w);
    if sigma <= tau_w {
        return None;
    }
    let c = tau_w / sigma;
    w.as_mut_slice().iter_mut().for_each(|x| *x *= c);
    Some(sigma)
}
