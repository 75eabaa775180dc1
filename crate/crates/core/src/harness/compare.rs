//! Multi-method comparisons over shared tasks and seeds.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::write_json;
use crate::error::{Error, Result};

use super::experiment::{run_experiment, ExperimentConfig, FinalMetrics, RunResult};

/// Mean and spread of one metric for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
    pub n: usize,
}

/// Per-seed difference `method − baseline` of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub method: String,
    pub baseline: String,
    pub metric: String,
    pub seed: u64,
    pub diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    /// `runs[m][s]` is method `m` on seed `s`.
    pub runs: Vec<Vec<FinalMetrics>>,
    pub summary: Vec<SummaryRow>,
    /// Differences of every method against the first.
    pub paired: Vec<PairedRow>,
}

/// Runs every config on every seed (data and training seeds both set to the
/// seed) and tabulates the final metrics.
pub fn compare_methods(cfgs: &[ExperimentConfig], seeds: &[u64]) -> Result<Comparison> {
    let results = run_grid(cfgs, seeds)?;
    Ok(tabulate(cfgs, seeds, &results))
}

/// Raw results of [`compare_methods`], `[config][seed]`.
pub fn run_grid(cfgs: &[ExperimentConfig], seeds: &[u64]) -> Result<Vec<Vec<RunResult>>> {
    if cfgs.len() < 2 {
        return Err(Error::Config(
            "a comparison needs at least two configs".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::Config("a comparison needs at least one seed".into()));
    }
    let base = cfgs[0].with_seed(0).task;
    if let Some(i) = cfgs.iter().position(|c| c.with_seed(0).task != base) {
        return Err(Error::Config(format!(
            "config {i} uses a different task than config 0"
        )));
    }
    let jobs: Vec<(usize, u64)> = (0..cfgs.len())
        .flat_map(|m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let flat: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(m, s)| {
            let mut c = cfgs[m].with_seed(s);
            c.out_path = None;
            run_experiment(&c)
        })
        .collect::<Result<_>>()?;
    Ok(flat
        .chunks(seeds.len())
        .map(<[RunResult]>::to_vec)
        .collect())
}

fn tabulate(cfgs: &[ExperimentConfig], seeds: &[u64], results: &[Vec<RunResult>]) -> Comparison {
    let mut methods: Vec<String> = Vec::new();
    for c in cfgs {
        let base = c.label();
        let mut name = base.clone();
        let mut n = 2;
        while methods.contains(&name) {
            name = format!("{base}#{n}");
            n += 1;
        }
        methods.push(name);
    }
    let runs: Vec<Vec<FinalMetrics>> = results
        .iter()
        .map(|r| r.iter().map(|x| x.final_metrics.clone()).collect())
        .collect();
    let mut summary = Vec::new();
    for (m, name) in methods.iter().enumerate() {
        for (j, metric) in FinalMetrics::NAMES.iter().enumerate() {
            let vals: Vec<f64> = runs[m].iter().map(|f| f.values()[j]).collect();
            let (mean, std) = mean_std(&vals);
            summary.push(SummaryRow {
                method: name.clone(),
                metric: metric.to_string(),
                mean,
                std,
                n: vals.len(),
            });
        }
    }
    let mut paired = Vec::new();
    for m in 1..methods.len() {
        for (j, metric) in FinalMetrics::NAMES.iter().enumerate() {
            for (s, &seed) in seeds.iter().enumerate() {
                paired.push(PairedRow {
                    method: methods[m].clone(),
                    baseline: methods[0].clone(),
                    metric: metric.to_string(),
                    seed,
                    diff: runs[m][s].values()[j] - runs[0][s].values()[j],
                });
            }
        }
    }
    Comparison {
        methods,
        seeds: seeds.to_vec(),
        runs,
        summary,
        paired,
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Writes `summary.csv`, `paired.csv` and `comparison.json` into `dir`.
pub fn write_comparison(dir: &Path, c: &Comparison) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for r in &c.summary {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("paired.csv"))?;
    if c.paired.is_empty() {
        w.write_record(["method", "baseline", "metric", "seed", "diff"])?;
    }
    for r in &c.paired {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&dir.join("comparison.json"), c)
}
