//! Synthetic tasks, the linear autoencoder, experiment runs, method
//! comparisons and timing benchmarks.

mod bench;
mod compare;
mod experiment;
mod linear_ae;
mod task;

pub use bench::{bench_rank_scaling, bench_transform_scaling, BenchReport, BenchRow};
pub use compare::{
    compare_methods, mean_std, run_grid, write_comparison, Comparison, PairedRow, SummaryRow,
};
pub use experiment::{
    init_codebook, read_metrics_csv, run_experiment, write_metrics_csv, write_metrics_jsonl,
    EvalPoint, ExperimentConfig, FinalMetrics, MethodConfig, MetricRow, PhaseTimings, RunResult,
    SavedRun, METRICS_HEADER, MODEL_KIND,
};
pub use linear_ae::LinearAutoencoder;
pub use task::{gen_gmm, GmmSpec, SyntheticTask, TaskKind};
