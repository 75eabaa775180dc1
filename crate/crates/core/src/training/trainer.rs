//! The per-step training procedure: cache refresh, search, surrogate,
//! backward, optimizer updates, gauge operations and codebook maintenance.

use serde::{Deserialize, Serialize};

use crate::codebook::{
    apply_transform, batch_nn, clip_in_place, refresh_cache, transform_forward, Assignment,
    CodebookState, TransformKind, TransformSpec, TransformedCache,
};
use crate::error::{Error, Result};
use crate::numerics::{spectral_norm_default, Mat, Rng};
use crate::quantizer::{
    backward_batch, ema_codebook_update, surrogate_forward, transform_backward, SurrogateForm,
    TransformGrads,
};
use crate::radius::{inv_softplus, sigmoid, softplus, RadiusSpec};
use crate::scalar::Scalar;

use super::adam::{adam_update, OptState};
use super::config::{DecoderInput, Protocol, TrainConfig};
use super::model::LatentModel;
use super::usage::{dead_code_reset, histogram_summary, Reservoir, UsageStats, UsageTracker};

/// Weight of the newest gradient norm in the spike detector's running average.
const GRAD_EMA_WEIGHT: f64 = 0.1;

/// Which quantizer the trainer runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantizerKind {
    /// Radius surrogate with an integrated transform.
    #[default]
    Grit,
    /// Straight-through estimator with a gradient-trained codebook.
    Ste,
    /// Straight-through estimator with an exponential-moving-average codebook.
    EmaVq,
}

impl QuantizerKind {
    pub fn name(self) -> &'static str {
        match self {
            QuantizerKind::Grit => "grit",
            QuantizerKind::Ste => "ste",
            QuantizerKind::EmaVq => "emavq",
        }
    }
}

/// Outcome of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Index of the step that produced this report.
    pub step: usize,
    pub loss: f64,
    pub stats: UsageStats,
    /// The gradient-spike safeguard rescaled this step's gradients.
    pub clipped: bool,
    /// The cached transformed codebook was rebuilt before the search.
    pub refreshed: bool,
    /// Codes re-initialized by a dead-code scan.
    pub resets: Vec<usize>,
}

/// Evaluation of the current parameters on a fixed input set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `Σ‖z − ẑ‖² / (n·d)`.
    pub quant_mse: f64,
    /// Model loss with the hard codeword as decoder input.
    pub recon_loss: f64,
    pub utilization: f64,
    pub dead_rate: f64,
    pub entropy: f64,
    #[serde(skip)]
    pub indices: Vec<usize>,
}

/// Owns every mutable piece of a training run.
pub struct Trainer<T: Scalar, M: LatentModel<T>> {
    pub config: TrainConfig,
    pub kind: QuantizerKind,
    pub form: SurrogateForm,
    pub state: CodebookState<T>,
    pub spec: TransformSpec<T>,
    pub radius: RadiusSpec<T>,
    pub model: M,
    cache: Option<TransformedCache<T>>,
    cache_dirty: bool,
    etilde: Option<Mat<T>>,
    opt_a: OptState<T>,
    opt_b: OptState<T>,
    opt_w: OptState<T>,
    opt_u1: OptState<T>,
    opt_v1: OptState<T>,
    opt_e: OptState<T>,
    radius_theta: Option<(Mat<T>, OptState<T>)>,
    usage: UsageTracker,
    reservoir: Reservoir<T>,
    rng: Rng,
    step: usize,
    grad_ema: Option<f64>,
    injected_scale: Option<f64>,
    last_grads: Option<TransformGrads<T>>,
    last_drift: f64,
}

/// Gradients and values computed by the read-only phase of a step.
struct Staged<T: Scalar> {
    loss: T,
    assignments: Vec<Assignment<T>>,
    z: Mat<T>,
    grads: TransformGrads<T>,
    usage_pull: Option<Mat<T>>,
    radius_grad: Option<T>,
}

impl<T: Scalar, M: LatentModel<T>> Trainer<T, M> {
    pub fn new(
        kind: QuantizerKind,
        state: CodebookState<T>,
        mut spec: TransformSpec<T>,
        mut radius: RadiusSpec<T>,
        form: SurrogateForm,
        config: TrainConfig,
        model: M,
    ) -> Result<Self> {
        for w in config.validate()? {
            log::warn!("{w}");
        }
        let (k, d) = (state.k(), state.d());
        spec.tau_w = T::lit(config.tau_w);
        spec.validate(k, d)?;
        radius.validate()?;
        if kind != QuantizerKind::Grit && spec.kind != TransformKind::Identity {
            return Err(Error::Config(format!(
                "the {} baseline requires the identity transform",
                kind.name()
            )));
        }
        if spec.has_w() {
            clip_in_place(&mut spec.w, spec.tau_w);
        }
        if let Some(s) = &config.radius_schedule {
            radius.set_hyper(T::lit(s.value_at(0)))?;
        }
        let radius_theta = if config.learn_radius && config.radius_schedule.is_none() {
            let h = radius.hyper().filter(|_| kind == QuantizerKind::Grit).ok_or_else(|| {
                Error::Config(format!(
                    "learn_radius needs the surrogate and a family with a scalar hyperparameter, got {}",
                    radius.family()
                ))
            })?;
            let theta = Mat::from_vec(1, 1, vec![inv_softplus(h)])?;
            let opt = OptState::like(&theta);
            Some((theta, opt))
        } else {
            None
        };
        let etilde = match (kind, config.protocol) {
            (QuantizerKind::EmaVq, _) | (QuantizerKind::Grit, Protocol::JointEMA) => {
                Some(state.e.clone())
            }
            _ => None,
        };
        Ok(Self {
            opt_a: OptState::like(&spec.a),
            opt_b: OptState::like(&spec.b),
            opt_w: OptState::like(&spec.w),
            opt_u1: OptState::like(&spec.u1),
            opt_v1: OptState::like(&spec.v1),
            opt_e: OptState::like(&state.e),
            usage: UsageTracker::new(k, config.usage_decay, config.usage_window),
            reservoir: Reservoir::new(config.reservoir),
            rng: Rng::new(config.seed).fork(0x72_6573_6574),
            step: 0,
            grad_ema: None,
            injected_scale: None,
            last_grads: None,
            last_drift: 0.0,
            cache: None,
            cache_dirty: true,
            etilde,
            radius_theta,
            config,
            kind,
            form,
            state,
            spec,
            radius,
            model,
        })
    }

    /// Number of completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn cache(&self) -> Option<&TransformedCache<T>> {
        self.cache.as_ref()
    }

    pub fn usage(&self) -> &UsageTracker {
        &self.usage
    }

    pub fn ema_buffer(&self) -> Option<&Mat<T>> {
        self.etilde.as_ref()
    }

    /// Codebook and transform gradients of the last successful step, before
    /// the usage regularizer and the spike safeguard.
    pub fn last_grads(&self) -> Option<&TransformGrads<T>> {
        self.last_grads.as_ref()
    }

    /// Multiplies the next step's codebook and transform gradients by `factor`
    /// (used to exercise the spike safeguard).
    pub fn inject_gradient_scale(&mut self, factor: f64) {
        self.injected_scale = Some(factor);
    }

    /// `E′` under the current parameters.
    pub fn transformed(&self) -> Result<Mat<T>> {
        apply_transform(&self.spec, &self.state.e)
    }

    /// Quantizes `x` against freshly transformed codewords.
    pub fn evaluate(&self, x: &Mat<T>) -> Result<EvalReport> {
        evaluate_codebook(&self.model, &self.state.e, &self.spec, x)
    }

    /// Runs one step on a batch of inputs. On a non-finite value the step is
    /// abandoned and no parameter, statistic or counter changes.
    pub fn train_step(&mut self, x: &Mat<T>) -> Result<StepReport> {
        let step = self.step;
        if let Some(s) = &self.config.radius_schedule {
            self.radius.set_hyper(T::lit(s.value_at(step)))?;
        }
        let refresh_due = self.cache.is_none()
            || self.cache_dirty
            || step.is_multiple_of(self.config.cache_t)
            || self.kind != QuantizerKind::Grit;
        let fresh_cache = if refresh_due {
            Some(refresh_cache(
                &self.state,
                &self.spec,
                step,
                self.cache.as_ref(),
            )?)
        } else {
            None
        };
        let old_cache = self.cache.take();
        let staged = {
            let cache = fresh_cache
                .as_ref()
                .or(old_cache.as_ref())
                .expect("cache present");
            self.stage(x, cache, step)
        };
        self.cache = old_cache;
        let mut staged = staged?;

        let raw_grads = staged.grads.clone();
        let mut scale = self.injected_scale.take().unwrap_or(1.0);
        let raw_norm =
            grads_norm(&staged.grads, self.updates_e_by_gradient()).as_f64() * scale.abs();
        let mut clipped = false;
        let mut kept_norm = raw_norm;
        if let Some(ema) = self.grad_ema {
            let cap = self.config.spike_factor * ema;
            if ema > 0.0 && raw_norm > cap {
                scale *= cap / raw_norm;
                kept_norm = cap;
                clipped = true;
            }
        }
        if scale != 1.0 {
            scale_grads(&mut staged.grads, T::lit(scale));
            if !staged.grads.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: "scaled gradient".into(),
                });
            }
        }

        // commit
        let refreshed = fresh_cache.is_some();
        if let Some(c) = fresh_cache {
            self.last_drift = c.drift().as_f64();
            self.cache = Some(c);
            self.cache_dirty = false;
        }
        self.grad_ema = Some(match self.grad_ema {
            None => kept_norm,
            Some(e) => (1.0 - GRAD_EMA_WEIGHT) * e + GRAD_EMA_WEIGHT * kept_norm,
        });
        self.model.apply()?;
        self.apply_updates(&staged)?;
        let spec = &self.spec;
        if ![&self.state.e, &spec.a, &spec.b, &spec.w, &spec.u1, &spec.v1]
            .iter()
            .all(|m| m.is_finite())
        {
            return Err(Error::NonFinite {
                step,
                what: "parameters after update".into(),
            });
        }
        if let RadiusSpec::AdaptiveMahalanobis { .. } = self.radius {
            if self.kind == QuantizerKind::Grit {
                let residuals = Mat::from_fn(staged.assignments.len(), self.state.d(), |p, j| {
                    staged.assignments[p].residual[j]
                });
                self.radius.update_precision(&residuals)?;
            }
        }
        let indices: Vec<usize> = staged.assignments.iter().map(|a| a.index).collect();
        self.usage.observe(&indices);
        self.reservoir.push_batch(&staged.z);
        let resets = self.maybe_reset(step);
        self.step += 1;
        self.last_grads = Some(raw_grads);

        let mut stats = self.usage.stats();
        self.fill_stats(&mut stats, &staged.grads)?;
        Ok(StepReport {
            step,
            loss: staged.loss.as_f64(),
            stats,
            clipped,
            refreshed,
            resets,
        })
    }

    /// Read-only phase: forward, backward and finiteness checks.
    fn stage(&mut self, x: &Mat<T>, cache: &TransformedCache<T>, step: usize) -> Result<Staged<T>> {
        let nonfinite = |what: &str| Error::NonFinite {
            step,
            what: what.to_string(),
        };
        let z = self.model.encode(x)?;
        if !z.is_finite() {
            return Err(nonfinite("latents"));
        }
        // squared norms overflow before the codes themselves do
        if !cache.sq_norms.iter().all(|n| n.is_finite()) {
            return Err(nonfinite("transformed codebook"));
        }
        let (b, d, k) = (z.rows(), z.cols(), self.state.k());
        let assignments = batch_nn(cache, &z)?;
        let mut contexts = Vec::new();
        let mut q = Mat::zeros(b, d);
        if self.kind == QuantizerKind::Grit {
            contexts.reserve(b);
            for (p, a) in assignments.iter().enumerate() {
                let ctx = surrogate_forward(z.row(p), a, &self.radius, self.form)?;
                match self.config.decoder_input {
                    DecoderInput::Hard => q.set_row(p, &a.zhat),
                    DecoderInput::Surrogate => q.set_row(p, &ctx.z_q),
                }
                contexts.push(ctx);
            }
        } else {
            for (p, a) in assignments.iter().enumerate() {
                q.set_row(p, &a.zhat);
            }
        }
        let (loss, grad_q) = self.model.decode_loss(x, &q)?;
        if !loss.is_finite() || !grad_q.is_finite() {
            return Err(nonfinite("loss"));
        }

        let mut radius_grad = None;
        let (grad_z, grads) = match self.kind {
            QuantizerKind::Grit => {
                let (grad_z, g, a_values) = backward_batch(k, &contexts, &grad_q)?;
                let fwd = transform_forward(&self.spec, &self.state.e)?;
                let grads = transform_backward(&g, &self.state.e, &self.spec, &fwd)?;
                if let Some((theta, _)) = &self.radius_theta {
                    let mut acc = T::zero();
                    for (ctx, &a) in contexts.iter().zip(&a_values) {
                        if !ctx.degenerate {
                            acc += a * self
                                .radius
                                .hyper_derivative(ctx.assignment.gap)
                                .unwrap_or_else(T::zero);
                        }
                    }
                    radius_grad = Some(acc * sigmoid(theta[(0, 0)]));
                }
                (grad_z, grads)
            }
            QuantizerKind::Ste | QuantizerKind::EmaVq => {
                // codebook loss ½·mean‖sg[z] − e_i⋆‖², used by the gradient-trained baseline
                let mut e_grad = Mat::zeros(k, d);
                if self.kind == QuantizerKind::Ste {
                    let inv_b = T::one() / T::lit(b.max(1) as f64);
                    for a in &assignments {
                        for (o, &r) in e_grad.row_mut(a.index).iter_mut().zip(&a.residual) {
                            *o -= r * inv_b;
                        }
                    }
                }
                let grads = TransformGrads {
                    w: None,
                    a: None,
                    b: None,
                    u1: None,
                    v1: None,
                    e: e_grad,
                };
                (grad_q.clone(), grads)
            }
        };
        if !grad_z.is_finite() {
            return Err(nonfinite("latent gradient"));
        }
        if !grads.is_finite() {
            return Err(nonfinite("codebook gradient"));
        }
        if radius_grad.is_some_and(|g: T| !g.is_finite()) {
            return Err(nonfinite("radius hyperparameter gradient"));
        }
        self.model.backward(x, &q, &grad_q, &grad_z)?;
        if !self.model.pending_finite() {
            return Err(nonfinite("model gradient"));
        }

        let usage_pull = if self.kind == QuantizerKind::Grit
            && self.config.protocol != Protocol::FrozenE
            && self.config.lambda_u > 0.0
        {
            Some(self.usage_pull(&z))
        } else {
            None
        };
        Ok(Staged {
            loss,
            assignments,
            z,
            grads,
            usage_pull,
            radius_grad,
        })
    }

    /// Gradient of the usage hinge routed onto raw rows: each under-used code
    /// is pulled toward the batch latent mean with magnitude `λ_u`.
    fn usage_pull(&self, z: &Mat<T>) -> Mat<T> {
        let (k, d) = (self.state.k(), self.state.d());
        let mut mean = vec![T::zero(); d];
        for r in z.iter_rows() {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n = T::lit(z.rows().max(1) as f64);
        mean.iter_mut().for_each(|m| *m /= n);
        let tau_u = self.config.tau_u(k);
        let lambda = T::lit(self.config.lambda_u);
        let mut pull = Mat::zeros(k, d);
        for (i, &p) in self.usage.rates().iter().enumerate() {
            if p >= tau_u {
                continue;
            }
            let diff: Vec<T> = self
                .state
                .e
                .row(i)
                .iter()
                .zip(&mean)
                .map(|(&e, &m)| e - m)
                .collect();
            let len = diff.iter().map(|&x| x * x).sum::<T>().sqrt();
            if len > T::zero() {
                for (o, x) in pull.row_mut(i).iter_mut().zip(diff) {
                    *o = lambda * x / len;
                }
            }
        }
        pull
    }

    fn apply_updates(&mut self, staged: &Staged<T>) -> Result<()> {
        let cfg = &self.config;
        let g = &staged.grads;
        let (lr_m, wd_m, lr_w) = (
            T::lit(cfg.lr_m),
            T::lit(cfg.weight_decay_m),
            T::lit(cfg.lr_w),
        );
        if let Some(ga) = &g.a {
            adam_update(&mut self.opt_a, &mut self.spec.a, ga, lr_m, wd_m)?;
        }
        if let Some(gb) = &g.b {
            adam_update(&mut self.opt_b, &mut self.spec.b, gb, lr_m, wd_m)?;
        }
        if let Some(gu) = &g.u1 {
            adam_update(&mut self.opt_u1, &mut self.spec.u1, gu, lr_m, wd_m)?;
        }
        if let Some(gv) = &g.v1 {
            adam_update(&mut self.opt_v1, &mut self.spec.v1, gv, lr_m, wd_m)?;
        }
        if let Some(gw) = &g.w {
            adam_update(&mut self.opt_w, &mut self.spec.w, gw, lr_w, T::zero())?;
            clip_in_place(&mut self.spec.w, self.spec.tau_w);
        }
        let lr_e = T::lit(cfg.lr_e);
        match (self.kind, cfg.protocol) {
            (QuantizerKind::Ste, _) | (QuantizerKind::Grit, Protocol::JointDirect) => {
                let mut ge = g.e.clone();
                if let Some(pull) = &staged.usage_pull {
                    ge.add_scaled(pull, T::one())?;
                }
                adam_update(&mut self.opt_e, &mut self.state.e, &ge, lr_e, T::zero())?;
            }
            (QuantizerKind::EmaVq, _) | (QuantizerKind::Grit, Protocol::JointEMA) => {
                let indices: Vec<usize> = staged.assignments.iter().map(|a| a.index).collect();
                let etilde = self.etilde.as_mut().expect("EMA buffer allocated");
                let mut next =
                    ema_codebook_update(etilde, &indices, &staged.z, T::lit(cfg.ema_momentum))?;
                if let Some(pull) = &staged.usage_pull {
                    next.add_scaled(pull, -lr_e)?;
                }
                *etilde = next;
                if (self.step + 1).is_multiple_of(cfg.t_ema) {
                    let mut e = etilde.clone();
                    if cfg.ema_normalize {
                        e.normalize_rows();
                    }
                    self.state.e = e;
                }
            }
            (QuantizerKind::Grit, Protocol::FrozenE) => {}
        }
        if self.kind == QuantizerKind::Ste || self.kind == QuantizerKind::EmaVq {
            self.cache_dirty = true;
        }
        if let (Some((theta, opt)), Some(gr)) = (self.radius_theta.as_mut(), staged.radius_grad) {
            let grad = Mat::from_vec(1, 1, vec![gr])?;
            adam_update(opt, theta, &grad, T::lit(cfg.lr_radius), T::zero())?;
            self.radius.set_hyper(softplus(theta[(0, 0)]))?;
        }
        Ok(())
    }

    fn maybe_reset(&mut self, step: usize) -> Vec<usize> {
        let t_scan = self.config.t_scan;
        if self.kind != QuantizerKind::Grit
            || self.config.protocol == Protocol::FrozenE
            || t_scan == 0
            || !(step + 1).is_multiple_of(t_scan)
        {
            return Vec::new();
        }
        let resets = dead_code_reset(
            &mut self.state.e,
            self.usage.rates(),
            self.config.tau_dead,
            &self.reservoir,
            self.config.reset_jitter,
            &mut self.rng,
        );
        for &i in &resets {
            self.usage.reset_rate(i);
            if let Some(et) = self.etilde.as_mut() {
                et.set_row(i, self.state.e.row(i));
            }
        }
        if !resets.is_empty() {
            self.cache_dirty = true;
        }
        resets
    }

    fn fill_stats(&self, stats: &mut UsageStats, grads: &TransformGrads<T>) -> Result<()> {
        let cache = self.cache.as_ref().expect("cache present after a step");
        let norms = cache.eprime.row_norms();
        stats.row_norm_min = norms.iter().fold(f64::INFINITY, |m, n| m.min(n.as_f64()));
        stats.row_norm_max = norms.iter().fold(0.0, |m, n| m.max(n.as_f64()));
        stats.sigma_w = if self.spec.has_w() {
            spectral_norm_default(&self.spec.w).as_f64()
        } else {
            1.0
        };
        stats.grad_norm_w = grads.w_norm().as_f64();
        stats.grad_norm_m = grads.mixer_norm().as_f64();
        stats.grad_norm_e = if self.updates_e_by_gradient() {
            grads.e.frobenius().as_f64()
        } else {
            0.0
        };
        stats.drift = self.last_drift;
        Ok(())
    }

    fn updates_e_by_gradient(&self) -> bool {
        matches!(
            (self.kind, self.config.protocol),
            (QuantizerKind::Ste, _) | (QuantizerKind::Grit, Protocol::JointDirect)
        )
    }
}

/// Encodes `x`, quantizes against `E′` of `(e, spec)` and scores the hard reconstruction.
pub fn evaluate_codebook<T: Scalar, M: LatentModel<T>>(
    model: &M,
    e: &Mat<T>,
    spec: &TransformSpec<T>,
    x: &Mat<T>,
) -> Result<EvalReport> {
    let z = model.encode(x)?;
    let cache = TransformedCache::from_eprime(apply_transform(spec, e)?, 0);
    let assignments = batch_nn(&cache, &z)?;
    let mut zhat = Mat::zeros(z.rows(), z.cols());
    let mut counts = vec![0u64; cache.k()];
    let mut sq = 0.0;
    for (p, a) in assignments.iter().enumerate() {
        zhat.set_row(p, &a.zhat);
        counts[a.index] += 1;
        sq += (a.gap * a.gap).as_f64();
    }
    let (recon, _) = model.decode_loss(x, &zhat)?;
    let (utilization, entropy) = histogram_summary(&counts);
    Ok(EvalReport {
        quant_mse: sq / (z.rows().max(1) * z.cols()) as f64,
        recon_loss: recon.as_f64(),
        utilization,
        dead_rate: 1.0 - utilization,
        entropy,
        indices: assignments.iter().map(|a| a.index).collect(),
    })
}

/// Global norm of the gradient groups that drive an optimizer.
fn grads_norm<T: Scalar>(g: &TransformGrads<T>, include_e: bool) -> T {
    let e = if include_e {
        g.e.frobenius().powi(2)
    } else {
        T::zero()
    };
    (g.mixer_norm().powi(2) + g.w_norm().powi(2) + e).sqrt()
}

fn scale_grads<T: Scalar>(g: &mut TransformGrads<T>, c: T) {
    for m in [&mut g.w, &mut g.a, &mut g.b, &mut g.u1, &mut g.v1]
        .into_iter()
        .flatten()
    {
        m.as_mut_slice().iter_mut().for_each(|x| *x *= c);
    }
    g.e.as_mut_slice().iter_mut().for_each(|x| *x *= c);
}
