//! `gritvq` command-line runner: training runs, method comparisons, gradient
//! checks, transform timing and inspection of saved runs.
//!
//! Exit codes: 0 on success, 1 on a failed check or I/O error, 2 on an
//! invalid configuration, 3 when training aborts on a non-finite value.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gritvq::codebook::{refresh_cache, CodebookState, TransformKind};
use gritvq::gradcheck::{
    check_pipeline_gradients, check_transform_gradients, FdConfig, GradReport, GradTarget,
};
use gritvq::harness::{
    bench_rank_scaling, bench_transform_scaling, compare_methods, run_experiment, write_comparison,
    BenchReport, ExperimentConfig, MethodConfig, SavedRun, SyntheticTask,
};
use gritvq::numerics::spectral_norm_default;
use gritvq::quantizer::SurrogateForm;
use gritvq::training::TrainConfig;
use gritvq::{Error, RadiusFamily};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "gritvq",
    version,
    about = "Radius-surrogate vector quantization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method on a synthetic task.
    Train(TrainArgs),
    /// Run several configs over the same seeds and tabulate final metrics.
    Compare(CompareArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Time the codebook transform as K (or the rank) grows.
    Bench(BenchArgs),
    /// Print codebook statistics of a saved run.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    CollapseProne,
    WellSeparated,
    LinearAe,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Grit,
    Ste,
    EmaVq,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in task used when no config file is given.
    #[arg(long, value_enum, default_value = "collapse-prone")]
    preset: Preset,
    /// Method for the built-in preset.
    #[arg(long, value_enum, default_value = "grit")]
    method: Method,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Run directory for config, codebook, metrics and result files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, num_args = 2.., required = true)]
    configs: Vec<PathBuf>,
    /// Number of seeds, run as 0..N.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    steps: Option<usize>,
    /// Directory for summary.csv, paired.csv and comparison.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Radius family; all families when omitted.
    #[arg(long)]
    family: Option<String>,
    /// Transform kind; all kinds when omitted.
    #[arg(long)]
    transform: Option<String>,
    /// Accepted trials per (d, K) combination.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, value_enum, default_value = "unit")]
    form: Form,
    /// Check transform-parameter gradients on K=8, d=4, r=2 instead of
    /// encoder gradients.
    #[arg(long)]
    params: bool,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Form {
    Unit,
    Ratio,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
    k: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 32)]
    r: usize,
    /// Sweep these ranks at the largest K instead of sweeping K.
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Run directory written by `train --out`.
    dir: PathBuf,
    #[arg(long)]
    json: bool,
}

enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Lib(Error::Config(_) | Error::Json(_) | Error::Domain(_)) => 2,
            Failure::Lib(Error::NonFinite { .. }) => 3,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => train(a),
        Command::Compare(a) => compare(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
        Command::Inspect(a) => inspect(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Lib(e) => eprintln!("error: {e}"),
                Failure::Check(msg) => eprintln!("check failed: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn preset_config(preset: Preset, method: Method, seed: u64) -> ExperimentConfig {
    let method = match method {
        Method::Grit => MethodConfig::grit_default(),
        Method::Ste => MethodConfig::Ste,
        Method::EmaVq => MethodConfig::EmaVq,
    };
    match preset {
        Preset::CollapseProne => ExperimentConfig::collapse_prone(method, seed, 5000),
        Preset::WellSeparated | Preset::LinearAe => {
            let (task, k) = match preset {
                Preset::WellSeparated => (SyntheticTask::well_separated(seed), 16),
                _ => (SyntheticTask::linear_ae(seed), 32),
            };
            let train = TrainConfig {
                steps: 5000,
                seed,
                ..TrainConfig::default()
            };
            let mut cfg = ExperimentConfig::new(task, method, train, k);
            // the latent dimension of the autoencoder task caps the rank
            if let MethodConfig::Grit { transform, .. } = &mut cfg.method {
                transform.rank = transform.rank.min(cfg.task.latent_dim);
            }
            cfg
        }
    }
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => preset_config(a.preset, a.method, a.seed.unwrap_or(0)),
    };
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    if let Some(out) = a.out {
        cfg.out_path = Some(out);
    }
    if a.dump_config {
        println!(
            "{}",
            serde_json::to_string_pretty(&cfg).map_err(Error::from)?
        );
        return Ok(());
    }
    // validate before running so config errors exit with code 2
    cfg.validate()?;
    let r = run_experiment(&cfg)?;
    println!(
        "run {} ({}), seed {}, {} steps",
        r.label, r.method, r.seed, r.steps
    );
    println!("{:<16}{:>12}{:>12}", "metric", "initial", "final");
    for (name, (i, f)) in gritvq::harness::FinalMetrics::NAMES
        .iter()
        .zip(r.initial.values().into_iter().zip(r.final_metrics.values()))
    {
        println!("{name:<16}{i:>12.6}{f:>12.6}");
    }
    println!(
        "clip events {}, reset events {}, codebook changed {}",
        r.clip_events, r.reset_events, r.codebook_changed
    );
    println!(
        "time: data {:.2}s, init {:.2}s, train {:.2}s, eval {:.2}s",
        r.timings.data, r.timings.init, r.timings.train, r.timings.eval
    );
    if let Some(out) = &cfg.out_path {
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn compare(a: CompareArgs) -> Result<(), Failure> {
    let mut cfgs = a
        .configs
        .iter()
        .map(|p| ExperimentConfig::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    for c in &mut cfgs {
        if let Some(steps) = a.steps {
            c.train.steps = steps;
        }
        c.validate()?;
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let c = compare_methods(&cfgs, &seeds)?;
    println!(
        "{:<20}{:<16}{:>12}{:>12}",
        "method", "metric", "mean", "std"
    );
    for row in &c.summary {
        println!(
            "{:<20}{:<16}{:>12.6}{:>12.6}",
            row.method, row.metric, row.mean, row.std
        );
    }
    if let Some(out) = &a.out {
        write_comparison(out, &c)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let families = match &a.family {
        Some(f) => vec![f.parse::<RadiusFamily>()?],
        None => RadiusFamily::ALL.to_vec(),
    };
    let transforms = match &a.transform {
        Some(t) => vec![t.parse::<TransformKind>()?],
        None => TransformKind::ALL.to_vec(),
    };
    let form = match a.form {
        Form::Unit => SurrogateForm::UnitDirection,
        Form::Ratio => SurrogateForm::RatioForm,
    };
    let tolerance = a.tolerance.unwrap_or(if a.params { 1e-5 } else { 1e-6 });
    let cfg = FdConfig {
        trials: a.trials,
        tolerance,
        seed: a.seed,
        ..FdConfig::default()
    };
    cfg.validate()?;
    let mut failed = Vec::new();
    println!(
        "{:<20}{:<18}{:>8}{:>12}{:>12}{:>8}  result",
        "family", "transform", "trials", "max err", "mean err", "skip"
    );
    for &family in &families {
        for &transform in &transforms {
            let target = GradTarget {
                form,
                ..GradTarget::new(family, transform)
            };
            let report: GradReport = if a.params {
                check_transform_gradients(&target, 8, 4, 2, &cfg)?
            } else {
                check_pipeline_gradients(&target, &cfg)?
            };
            let ok = report.passed(tolerance);
            println!(
                "{:<20}{:<18}{:>8}{:>12.2e}{:>12.2e}{:>7.1}%  {}",
                report.family,
                report.transform,
                report.trials,
                report.max_rel_err,
                report.mean_rel_err,
                100.0 * report.skip_rate,
                if ok { "PASS" } else { "FAIL" }
            );
            if !ok {
                failed.push(format!("{family}/{transform}"));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}

fn bench(a: BenchArgs) -> Result<(), Failure> {
    let report: BenchReport = match &a.ranks {
        Some(ranks) => {
            let k = a.k.iter().copied().max().unwrap_or(1024);
            bench_rank_scaling(k, a.d, ranks, a.repeats, a.seed)?
        }
        None => bench_transform_scaling(&a.k, a.d, a.r, a.repeats, a.seed)?,
    };
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(Error::from)?
        );
        return Ok(());
    }
    println!(
        "{:>8}{:>6}{:>6}{:>14}{:>14}{:>14}",
        "K", "d", "r", "min (s)", "mean (s)", "std (s)"
    );
    for row in &report.rows {
        println!(
            "{:>8}{:>6}{:>6}{:>14.3e}{:>14.3e}{:>14.3e}",
            row.k, row.d, row.r, row.min_secs, row.mean_secs, row.std_secs
        );
    }
    let ratios: Vec<String> = report.ratios.iter().map(|r| format!("{r:.2}")).collect();
    println!("ratios of successive min times: {}", ratios.join(", "));
    println!(
        "least-squares fit: time = {:.3e} s per unit + {:.3e} s",
        report.slope, report.intercept
    );
    Ok(())
}

#[derive(Serialize)]
struct InspectReport {
    label: String,
    method: String,
    k: usize,
    d: usize,
    transform: String,
    rank: usize,
    sigma_max_w: Option<f64>,
    tau_w: f64,
    row_norm_min: f64,
    row_norm_max: f64,
    min_pairwise_distance: f64,
    quant_mse: f64,
    utilization: f64,
    dead_rate: f64,
    entropy: f64,
    /// Eval-set assignment count per code.
    counts: Vec<usize>,
}

fn inspect_run(dir: &Path) -> Result<InspectReport, Error> {
    let run = SavedRun::load(dir)?;
    let (_, eval) = run.config.task.generate::<f64>()?;
    let report = run.evaluate(&eval)?;
    let cache = refresh_cache(&run.state, &run.spec, 0, None)?;
    let norms = cache.eprime.row_norms();
    let mut counts = vec![0; run.state.k()];
    for &i in &report.indices {
        counts[i] += 1;
    }
    let w = &run.spec.w;
    Ok(InspectReport {
        label: run.config.label(),
        method: run.config.method.name().to_string(),
        k: run.state.k(),
        d: run.state.d(),
        transform: run.spec.kind.to_string(),
        rank: run.spec.a.cols(),
        sigma_max_w: (w.rows() > 0).then(|| spectral_norm_default(w)),
        tau_w: run.spec.tau_w,
        row_norm_min: norms.iter().copied().fold(f64::INFINITY, f64::min),
        row_norm_max: norms.iter().copied().fold(0.0, f64::max),
        min_pairwise_distance: CodebookState::new(cache.eprime)?.min_pairwise_distance(),
        quant_mse: report.quant_mse,
        utilization: report.utilization,
        dead_rate: report.dead_rate,
        entropy: report.entropy,
        counts,
    })
}

fn inspect(a: InspectArgs) -> Result<(), Failure> {
    let r = inspect_run(&a.dir)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r).map_err(Error::from)?);
        return Ok(());
    }
    println!("run {} ({})", r.label, r.method);
    println!(
        "codebook K={} d={}, transform {} rank {}",
        r.k, r.d, r.transform, r.rank
    );
    if let Some(s) = r.sigma_max_w {
        println!("sigma_max(W) {s:.6} (cap {:.4})", r.tau_w);
    }
    println!(
        "E' row norms in [{:.6}, {:.6}]",
        r.row_norm_min, r.row_norm_max
    );
    println!("min pairwise distance {:.6}", r.min_pairwise_distance);
    println!(
        "eval: quant_mse {:.6}, utilization {:.4}, dead_rate {:.4}, entropy {:.4}",
        r.quant_mse, r.utilization, r.dead_rate, r.entropy
    );
    let used = r.counts.iter().filter(|&&c| c > 0).count();
    println!("codes used on eval {used}/{}", r.k);
    Ok(())
}
