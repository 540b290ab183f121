//! Grid sweeps over `tau_id`, `lr`, ensemble size and projection dimension.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use concurl_core::{Dataset, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::DataSource;
use crate::run;

pub const SUMMARY: &str = "sweep_summary.csv";
pub const CONDITIONAL_MEANS: &str = "sweep_conditional_means.csv";
pub const HISTOGRAM: &str = "sweep_acc_histogram.csv";
pub const HISTOGRAM_BINS: usize = 20;

/// Values to try for each swept hyperparameter. An empty list keeps the base
/// config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub tau_id: Vec<f64>,
    pub lr: Vec<f64>,
    pub ensemble_size: Vec<usize>,
    pub proj_dim: Vec<usize>,
}

/// `M = round(e^η)` for each log-scale value.
pub fn sizes_from_log(etas: &[f64]) -> Vec<usize> {
    etas.iter().map(|e| e.exp().round() as usize).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub tau_id: f64,
    pub lr: f64,
    pub ensemble_size: usize,
    pub proj_dim: usize,
    pub seed: u64,
}

impl Trial {
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            tau_id: self.tau_id,
            lr: self.lr,
            ensemble_size: self.ensemble_size,
            proj_dim: self.proj_dim,
            seed: self.seed,
            ..base.clone()
        }
    }

    pub fn dir_name(&self) -> String {
        format!("trial_{:04}", self.index)
    }
}

/// Cartesian product in the order tau_id, lr, ensemble size, proj_dim.
pub fn expand(grid: &SweepGrid, base: &TrainConfig) -> Vec<Trial> {
    let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
    let oru = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let mut trials = Vec::new();
    for &tau_id in &or(&grid.tau_id, base.tau_id) {
        for &lr in &or(&grid.lr, base.lr) {
            for &ensemble_size in &oru(&grid.ensemble_size, base.ensemble_size) {
                for &proj_dim in &oru(&grid.proj_dim, base.proj_dim) {
                    trials.push(Trial {
                        index: trials.len(),
                        tau_id,
                        lr,
                        ensemble_size,
                        proj_dim,
                        seed: base.seed,
                    });
                }
            }
        }
    }
    trials
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: Trial,
    pub dir: PathBuf,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub final_l_total: Option<f64>,
    pub error: Option<String>,
}

/// Runs every trial on a pool of `workers` threads. Failed trials are
/// recorded and do not stop the sweep.
pub fn run_sweep(
    base: &TrainConfig,
    grid: &SweepGrid,
    source: &DataSource,
    out: &Path,
    workers: usize,
) -> anyhow::Result<Vec<TrialResult>> {
    let trials = expand(grid, base);
    if trials.is_empty() {
        bail!("empty sweep grid");
    }
    let ds = source.load()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("sweep_grid.json"), serde_json::to_string_pretty(grid)?)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
    let results: Vec<TrialResult> =
        pool.install(|| trials.par_iter().map(|t| run_trial(t, base, &ds, source, out)).collect());
    write_summary(&out.join(SUMMARY), &results)?;
    write_conditional_means(&out.join(CONDITIONAL_MEANS), &conditional_means(&results))?;
    write_histogram(&out.join(HISTOGRAM), &results)?;
    Ok(results)
}

fn run_trial(t: &Trial, base: &TrainConfig, ds: &Dataset, source: &DataSource, out: &Path) -> TrialResult {
    let dir = out.join(t.dir_name());
    let cfg = t.config(base);
    let outcome = cfg
        .validate()
        .map_err(anyhow::Error::from)
        .and_then(|_| run::train_on(&cfg, ds, source, &dir));
    match outcome {
        Ok(o) => TrialResult {
            trial: t.clone(),
            dir,
            acc: o.report.as_ref().map(|r| r.acc),
            nmi: o.report.as_ref().map(|r| r.nmi),
            ari: o.report.as_ref().map(|r| r.ari),
            final_l_total: o.stats.last().map(|s| s.l_total),
            error: None,
        },
        Err(e) => {
            log::warn!("trial {} failed: {e:#}", t.index);
            TrialResult {
                trial: t.clone(),
                dir,
                acc: None,
                nmi: None,
                ari: None,
                final_l_total: None,
                error: Some(format!("{e:#}")),
            }
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_summary(path: &Path, results: &[TrialResult]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "trial", "tau_id", "lr", "ensemble_size", "proj_dim", "seed", "status", "acc", "nmi", "ari", "final_l_total",
        "error",
    ])?;
    for r in results {
        let t = &r.trial;
        w.write_record([
            t.index.to_string(),
            t.tau_id.to_string(),
            t.lr.to_string(),
            t.ensemble_size.to_string(),
            t.proj_dim.to_string(),
            t.seed.to_string(),
            if r.error.is_none() { "ok" } else { "failed" }.to_string(),
            opt(r.acc),
            opt(r.nmi),
            opt(r.ari),
            opt(r.final_l_total),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and population std of ACC over the trials sharing one value of one
/// hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMean {
    pub hyperparameter: String,
    pub value: String,
    pub trials: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
}

/// Conditional empirical means over successful trials, grouped per
/// hyperparameter value (values sorted numerically).
pub fn conditional_means(results: &[TrialResult]) -> Vec<ConditionalMean> {
    let keyed: [(&str, fn(&Trial) -> f64); 4] = [
        ("tau_id", |t| t.tau_id),
        ("lr", |t| t.lr),
        ("ensemble_size", |t| t.ensemble_size as f64),
        ("proj_dim", |t| t.proj_dim as f64),
    ];
    let mut out = Vec::new();
    for (name, key) in keyed {
        let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
        for r in results {
            if let Some(acc) = r.acc {
                let v = key(&r.trial);
                // order-preserving bits for non-negative floats
                groups.entry(v.to_bits()).or_insert((v, Vec::new())).1.push(acc);
            }
        }
        for (_, (v, accs)) in groups {
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            out.push(ConditionalMean {
                hyperparameter: name.to_string(),
                value: v.to_string(),
                trials: accs.len(),
                mean_acc: mean,
                std_acc: var.sqrt(),
            });
        }
    }
    out
}

fn write_conditional_means(path: &Path, means: &[ConditionalMean]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in means {
        w.serialize(m)?;
    }
    if means.is_empty() {
        w.write_record(["hyperparameter", "value", "trials", "mean_acc", "std_acc"])?;
    }
    w.flush()?;
    Ok(())
}

/// Counts of trial ACC in equal-width bins over `[0, 1]`; 1.0 falls in the
/// last bin.
pub fn acc_histogram(results: &[TrialResult]) -> Vec<usize> {
    let mut counts = vec![0; HISTOGRAM_BINS];
    for acc in results.iter().filter_map(|r| r.acc) {
        let bin = ((acc * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    counts
}

fn write_histogram(path: &Path, results: &[TrialResult]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_lo", "bin_hi", "count"])?;
    let width = 1.0 / HISTOGRAM_BINS as f64;
    for (i, c) in acc_histogram(results).into_iter().enumerate() {
        w.write_record([(i as f64 * width).to_string(), ((i + 1) as f64 * width).to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
