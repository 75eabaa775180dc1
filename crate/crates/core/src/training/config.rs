//! Training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::radius::LinearSchedule;

/// Which parameters are trained and how the raw codebook is updated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// Only the transform is trained; `E` never changes.
    #[default]
    FrozenE,
    /// Transform and `E` trained by gradient.
    JointDirect,
    /// Transform trained by gradient, `E` by exponential moving averages.
    JointEMA,
}

/// What the decoder consumes during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderInput {
    /// The hard codeword `ẑ` (same as at inference).
    #[default]
    Hard,
    /// The surrogate value `z_q`.
    Surrogate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub protocol: Protocol,
    pub lr_m: f64,
    pub lr_w: f64,
    pub lr_e: f64,
    pub weight_decay_m: f64,
    pub tau_w: f64,
    /// Steps between cache refreshes.
    pub cache_t: usize,
    pub lambda_u: f64,
    /// Under-use threshold; `None` means `1/(2K)`.
    pub tau_u: Option<f64>,
    pub ema_momentum: f64,
    pub t_ema: usize,
    /// Normalize `E` rows when the EMA buffer is copied into `E`.
    pub ema_normalize: bool,
    /// Steps between dead-code scans; 0 disables resets.
    pub t_scan: usize,
    pub tau_dead: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub decoder_input: DecoderInput,
    /// Per-step decay of the activation-rate estimate.
    pub usage_decay: f64,
    /// Steps in the utilization window.
    pub usage_window: usize,
    /// Recent latents kept for dead-code resets.
    pub reservoir: usize,
    pub reset_jitter: f64,
    /// Gradient norms above this multiple of their running average are rescaled.
    pub spike_factor: f64,
    /// Learn the radius hyperparameter through a softplus parameterization.
    pub learn_radius: bool,
    pub lr_radius: f64,
    /// Linear schedule for the radius hyperparameter (overrides learning).
    pub radius_schedule: Option<LinearSchedule>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::FrozenE,
            lr_m: 1e-3,
            lr_w: 2e-3,
            lr_e: 3e-4,
            weight_decay_m: 1e-4,
            tau_w: 1.75,
            cache_t: 8,
            lambda_u: 3e-4,
            tau_u: None,
            ema_momentum: 0.97,
            t_ema: 4,
            ema_normalize: true,
            t_scan: 1000,
            tau_dead: 0.005,
            steps: 5000,
            batch: 128,
            seed: 0,
            decoder_input: DecoderInput::Hard,
            usage_decay: 0.99,
            usage_window: 100,
            reservoir: 1024,
            reset_jitter: 1e-3,
            spike_factor: 5.0,
            learn_radius: false,
            lr_radius: 1e-3,
            radius_schedule: None,
        }
    }
}

impl TrainConfig {
    pub fn tau_u(&self, k: usize) -> f64 {
        self.tau_u.unwrap_or(0.5 / k as f64)
    }

    /// Rejects out-of-domain values; returns warnings for values outside the
    /// recommended bands.
    pub fn validate(&self) -> Result<Vec<String>> {
        let nonneg = [
            ("lr_m", self.lr_m),
            ("lr_w", self.lr_w),
            ("lr_e", self.lr_e),
            ("weight_decay_m", self.weight_decay_m),
            ("lambda_u", self.lambda_u),
            ("tau_dead", self.tau_dead),
            ("reset_jitter", self.reset_jitter),
            ("lr_radius", self.lr_radius),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if !(self.tau_w.is_finite() && self.tau_w > 0.0) {
            return Err(Error::Config(format!(
                "tau_w must be positive, got {}",
                self.tau_w
            )));
        }
        if let Some(t) = self.tau_u {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("tau_u must lie in [0, 1], got {t}")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "ema_momentum must lie in [0, 1), got {}",
                self.ema_momentum
            )));
        }
        if !(0.0..1.0).contains(&self.usage_decay) {
            return Err(Error::Config(format!(
                "usage_decay must lie in [0, 1), got {}",
                self.usage_decay
            )));
        }
        if self.cache_t == 0 || self.t_ema == 0 || self.batch == 0 || self.usage_window == 0 {
            return Err(Error::Config(
                "cache_t, t_ema, batch and usage_window must be at least 1".into(),
            ));
        }
        if !(self.spike_factor > 1.0) {
            return Err(Error::Config(format!(
                "spike_factor must exceed 1, got {}",
                self.spike_factor
            )));
        }
        let mut warnings = Vec::new();
        if !(0.95..=0.99).contains(&self.ema_momentum) && self.protocol == Protocol::JointEMA {
            warnings.push(format!(
                "ema_momentum {} is outside the recommended band [0.95, 0.99]",
                self.ema_momentum
            ));
        }
        Ok(warnings)
    }
}
