//! Single experiment runs and their on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codebook::{
    init_gaussian, init_kmeans, load_codebook, save_codebook, write_json, CodebookInit,
    CodebookState, Envelope, TransformConfig, TransformSpec,
};
use crate::error::{Error, Result};
use crate::numerics::{Mat, Rng};
use crate::quantizer::SurrogateForm;
use crate::radius::RadiusSpec;
use crate::training::{
    evaluate_codebook, DirectModel, EvalReport, LatentModel, QuantizerKind, StepReport,
    TrainConfig, Trainer,
};

use super::linear_ae::LinearAutoencoder;
use super::task::{SyntheticTask, TaskKind};

pub const MODEL_KIND: &str = "linear_ae";
pub const METRICS_HEADER: [&str; 10] = [
    "step",
    "loss",
    "utilization",
    "dead_rate",
    "entropy",
    "sigma_w",
    "drift",
    "grad_norm_W",
    "grad_norm_M",
    "grad_norm_E",
];

/// Quantizer under test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", deny_unknown_fields)]
pub enum MethodConfig {
    Grit {
        radius: RadiusSpec<f64>,
        #[serde(default)]
        transform: TransformConfig,
        #[serde(default)]
        form: SurrogateForm,
    },
    Ste,
    EmaVq,
}

impl MethodConfig {
    pub fn kind(&self) -> QuantizerKind {
        match self {
            MethodConfig::Grit { .. } => QuantizerKind::Grit,
            MethodConfig::Ste => QuantizerKind::Ste,
            MethodConfig::EmaVq => QuantizerKind::EmaVq,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }

    /// Euclidean radius with a rank-16 linear low-rank transform.
    pub fn grit_default() -> Self {
        MethodConfig::Grit {
            radius: RadiusSpec::euclidean(),
            transform: TransformConfig {
                rank: 16,
                ..TransformConfig::default()
            },
            form: SurrogateForm::UnitDirection,
        }
    }
}

fn default_init() -> CodebookInit {
    CodebookInit::Gaussian
}

fn default_log_every() -> usize {
    100
}

fn default_model_lr() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Name used in comparison tables; defaults to the method name.
    #[serde(default)]
    pub label: Option<String>,
    pub task: SyntheticTask,
    pub method: MethodConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Codebook size.
    pub k: usize,
    #[serde(default = "default_init")]
    pub init: CodebookInit,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Learning rate of the autoencoder weights (linear-autoencoder tasks).
    #[serde(default = "default_model_lr")]
    pub model_lr: f64,
    #[serde(default)]
    pub out_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(task: SyntheticTask, method: MethodConfig, train: TrainConfig, k: usize) -> Self {
        Self {
            label: None,
            task,
            method,
            train,
            k,
            init: default_init(),
            log_every: default_log_every(),
            model_lr: default_model_lr(),
            out_path: None,
        }
    }

    /// Collapse-prone setup: `K = 64` codes initialized in a tight cloud
    /// around one of eight mixture components.
    pub fn collapse_prone(method: MethodConfig, seed: u64, steps: usize) -> Self {
        let train = TrainConfig {
            steps,
            seed,
            ..TrainConfig::default()
        };
        let mut cfg = Self::new(SyntheticTask::collapse_prone(seed), method, train, 64);
        cfg.init = CodebookInit::Concentrated { spread: 0.05 };
        cfg
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.method.name().to_string())
    }

    /// Same experiment with both the data and the training seed set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.task.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<Vec<String>> {
        self.task.validate()?;
        if self.k < 2 {
            return Err(Error::Config(format!(
                "k must be at least 2, got {}",
                self.k
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if let MethodConfig::Grit { radius, .. } = &self.method {
            radius.validate()?;
            if radius.dim().is_some_and(|d| d != self.task.latent_dim) {
                return Err(Error::Config(
                    "radius precision does not match latent_dim".into(),
                ));
            }
        }
        if let CodebookInit::KMeans { .. } = self.init {
            if self.task.n_train < self.k {
                return Err(Error::Config(format!(
                    "k-means init needs at least {} training points",
                    self.k
                )));
            }
        }
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Headline metrics of a parameter snapshot on the eval set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    /// `Σ‖z − ẑ‖² / (n·d)`.
    pub quant_mse: f64,
    /// `Σ‖x̂ − x‖² / (n·D)`.
    pub recon_mse: f64,
    pub utilization: f64,
    pub dead_rate: f64,
    pub entropy: f64,
}

impl FinalMetrics {
    pub const NAMES: [&'static str; 5] = [
        "quant_mse",
        "recon_mse",
        "utilization",
        "dead_rate",
        "entropy",
    ];

    fn from_eval(r: &EvalReport, ambient: usize) -> Self {
        Self {
            quant_mse: r.quant_mse,
            recon_mse: 2.0 * r.recon_loss / ambient as f64,
            utilization: r.utilization,
            dead_rate: r.dead_rate,
            entropy: r.entropy,
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [
            self.quant_mse,
            self.recon_mse,
            self.utilization,
            self.dead_rate,
            self.entropy,
        ]
    }
}

/// One row of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub utilization: f64,
    pub dead_rate: f64,
    pub entropy: f64,
    pub sigma_w: f64,
    pub drift: f64,
    #[serde(rename = "grad_norm_W")]
    pub grad_norm_w: f64,
    #[serde(rename = "grad_norm_M")]
    pub grad_norm_m: f64,
    #[serde(rename = "grad_norm_E")]
    pub grad_norm_e: f64,
}

impl MetricRow {
    pub fn from_report(r: &StepReport) -> Self {
        let s = &r.stats;
        Self {
            step: r.step + 1,
            loss: r.loss,
            utilization: s.utilization,
            dead_rate: s.dead_rate,
            entropy: s.entropy,
            sigma_w: s.sigma_w,
            drift: s.drift,
            grad_norm_w: s.grad_norm_w,
            grad_norm_m: s.grad_norm_m,
            grad_norm_e: s.grad_norm_e,
        }
    }
}

/// Eval-set metrics at a logging point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    #[serde(flatten)]
    pub metrics: FinalMetrics,
}

/// Wall-clock seconds per phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub data: f64,
    pub init: f64,
    pub train: f64,
    pub eval: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub method: String,
    pub seed: u64,
    pub steps: usize,
    /// Eval-set metrics before the first step.
    pub initial: FinalMetrics,
    pub final_metrics: FinalMetrics,
    /// Training metrics every `log_every` steps.
    pub series: Vec<MetricRow>,
    /// Eval-set metrics every `log_every` steps.
    pub eval_series: Vec<EvalPoint>,
    /// The raw codebook differs bitwise from its initialization.
    pub codebook_changed: bool,
    pub clip_events: usize,
    pub reset_events: usize,
    pub timings: PhaseTimings,
}

/// Raw codebook for an experiment, built in the latent space of `encode`.
pub fn init_codebook(
    cfg: &ExperimentConfig,
    train: &Mat<f64>,
    encode: &dyn Fn(&Mat<f64>) -> Result<Mat<f64>>,
    rng: &mut Rng,
) -> Result<CodebookState<f64>> {
    let d = cfg.task.latent_dim;
    match cfg.init {
        CodebookInit::Gaussian => init_gaussian(cfg.k, d, rng),
        CodebookInit::KMeans { iters } => {
            let n = train.rows().min(4096);
            let warm = encode(&train.select_rows(&(0..n).collect::<Vec<_>>()))?;
            init_kmeans(cfg.k, &warm, iters, rng)
        }
        CodebookInit::Concentrated { spread } => {
            let mean = Mat::from_rows(&[cfg.task.gmm.means[0].clone()])?;
            let centre = encode(&mean)?;
            let mut dirs = rng.normal_mat::<f64>(cfg.k, d);
            dirs.normalize_rows();
            let e = Mat::from_fn(cfg.k, d, |i, j| centre[(0, j)] + spread * dirs[(i, j)]);
            CodebookState::new(e)
        }
    }
}

/// Trains the configured method on its task and writes the run directory
/// when `out_path` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    for w in cfg.validate()? {
        log::warn!("{w}");
    }
    let t0 = Instant::now();
    let (train, eval) = cfg.task.generate::<f64>()?;
    let data_secs = t0.elapsed().as_secs_f64();
    let root = Rng::new(cfg.train.seed);
    match cfg.task.kind {
        TaskKind::GmmDirect => run_with(cfg, DirectModel, &train, &eval, &root, data_secs),
        TaskKind::LinearAE => {
            let ae = LinearAutoencoder::new(
                cfg.task.ambient_dim,
                cfg.task.latent_dim,
                cfg.model_lr,
                &mut root.fork(3),
            );
            run_with(cfg, ae, &train, &eval, &root, data_secs)
        }
    }
}

/// Model state that can be persisted next to the codebook.
trait Persist {
    fn save(&self, _dir: &Path) -> Result<()> {
        Ok(())
    }
}

impl Persist for DirectModel {}

impl Persist for LinearAutoencoder<f64> {
    fn save(&self, dir: &Path) -> Result<()> {
        let mut env = Envelope::new(MODEL_KIND);
        env.tensors.insert("We".into(), self.we.clone());
        env.tensors.insert("Wd".into(), self.wd.clone());
        write_json(&dir.join("model.json"), &env)
    }
}

fn run_with<M: LatentModel<f64> + Persist>(
    cfg: &ExperimentConfig,
    model: M,
    train: &Mat<f64>,
    eval: &Mat<f64>,
    root: &Rng,
    data_secs: f64,
) -> Result<RunResult> {
    let t_init = Instant::now();
    let mut init_rng = root.fork(1);
    let state = init_codebook(cfg, train, &|x| model.encode(x), &mut init_rng)?;
    let (state, spec, radius, form) = match &cfg.method {
        MethodConfig::Grit {
            radius,
            transform,
            form,
        } => {
            let mut t = transform.clone();
            t.tau_w = cfg.train.tau_w;
            let concentrated = matches!(cfg.init, CodebookInit::Concentrated { .. });
            let (state, spec) = if concentrated && t.kind.is_low_rank() {
                // Raw codewords stay isotropic; the transform carries the
                // concentrated starting point.
                let raw = init_gaussian(cfg.k, cfg.task.latent_dim, &mut init_rng)?;
                let spec = t.build_toward(&raw.e, &state.e, &mut init_rng)?;
                (raw, spec)
            } else {
                let spec = t.build(&state.e, &mut init_rng)?;
                (state, spec)
            };
            (state, spec, radius.clone(), *form)
        }
        _ => (
            state,
            TransformSpec::identity(),
            RadiusSpec::euclidean(),
            SurrogateForm::UnitDirection,
        ),
    };
    let e0 = state.e.clone();
    let mut trainer = Trainer::new(
        cfg.method.kind(),
        state,
        spec,
        radius,
        form,
        cfg.train.clone(),
        model,
    )?;
    let initial = FinalMetrics::from_eval(&trainer.evaluate(eval)?, cfg.task.ambient_dim);
    let init_secs = t_init.elapsed().as_secs_f64();

    let t_train = Instant::now();
    let mut eval_secs = 0.0;
    let mut batch_rng = root.fork(2);
    let mut series = Vec::new();
    let mut eval_series = Vec::new();
    let (mut clip_events, mut reset_events) = (0, 0);
    let mut idx = vec![0usize; cfg.train.batch];
    for step in 0..cfg.train.steps {
        idx.iter_mut()
            .for_each(|i| *i = batch_rng.below(train.rows()));
        let report = trainer.train_step(&train.select_rows(&idx))?;
        clip_events += report.clipped as usize;
        reset_events += report.resets.len();
        if (step + 1) % cfg.log_every == 0 {
            series.push(MetricRow::from_report(&report));
            let t = Instant::now();
            let metrics = FinalMetrics::from_eval(&trainer.evaluate(eval)?, cfg.task.ambient_dim);
            eval_series.push(EvalPoint {
                step: step + 1,
                metrics,
            });
            eval_secs += t.elapsed().as_secs_f64();
        }
    }
    let train_secs = t_train.elapsed().as_secs_f64() - eval_secs;

    let t = Instant::now();
    let final_metrics = FinalMetrics::from_eval(&trainer.evaluate(eval)?, cfg.task.ambient_dim);
    eval_secs += t.elapsed().as_secs_f64();
    let codebook_changed = e0
        .as_slice()
        .iter()
        .zip(trainer.state.e.as_slice())
        .any(|(a, b)| a.to_bits() != b.to_bits());

    let result = RunResult {
        label: cfg.label(),
        method: cfg.method.name().to_string(),
        seed: cfg.train.seed,
        steps: cfg.train.steps,
        initial,
        final_metrics,
        series,
        eval_series,
        codebook_changed,
        clip_events,
        reset_events,
        timings: PhaseTimings {
            data: data_secs,
            init: init_secs,
            train: train_secs,
            eval: eval_secs,
        },
    };
    if let Some(dir) = &cfg.out_path {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("config.json"), cfg)?;
        save_codebook(&dir.join("codebook.json"), &trainer.state, &trainer.spec)?;
        trainer.model.save(dir)?;
        write_metrics_csv(&dir.join("metrics.csv"), &result.series)?;
        write_metrics_jsonl(&dir.join("metrics.jsonl"), &result.series)?;
        write_json(&dir.join("result.json"), &result)?;
    }
    Ok(result)
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(METRICS_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_jsonl(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// A persisted run reloaded from its directory.
pub struct SavedRun {
    pub config: ExperimentConfig,
    pub state: CodebookState<f64>,
    pub spec: TransformSpec<f64>,
    /// Autoencoder weights `(W_e, W_d)` for linear-autoencoder tasks.
    pub model: Option<(Mat<f64>, Mat<f64>)>,
}

impl SavedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(&dir.join("config.json"))?;
        let (state, spec) = load_codebook(&dir.join("codebook.json"))?;
        let model = if config.task.kind == TaskKind::LinearAE {
            let env: Envelope<f64> =
                serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
            let get = |n: &str| {
                env.tensors
                    .get(n)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("model.json is missing `{n}`")))
            };
            Some((get("We")?, get("Wd")?))
        } else {
            None
        };
        Ok(Self {
            config,
            state,
            spec,
            model,
        })
    }

    /// Hard assignments of `x` under the saved parameters.
    pub fn assign(&self, x: &Mat<f64>) -> Result<Vec<usize>> {
        Ok(self.evaluate(x)?.indices)
    }

    pub fn evaluate(&self, x: &Mat<f64>) -> Result<EvalReport> {
        match &self.model {
            Some((we, wd)) => {
                let ae = LinearAutoencoder::from_weights(we.clone(), wd.clone(), 0.0);
                evaluate_codebook(&ae, &self.state.e, &self.spec, x)
            }
            None => evaluate_codebook(&DirectModel, &self.state.e, &self.spec, x),
        }
    }
}
