//! Training, evaluation and diversity runs with their on-disk artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use concurl_core::dataio::DatasetFingerprint;
use concurl_core::trainer::{self, resume, EpochStats, ModelState};
use concurl_core::{Dataset, MetricReport, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::DataSource;

pub const MANIFEST: &str = "manifest.json";
pub const STATS: &str = "stats.jsonl";
pub const METRICS: &str = "metrics.json";
pub const CONFUSION: &str = "confusion.csv";
pub const CHECKPOINTS: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.json";

/// Self-description of a run directory, written before training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Fully resolved: `k` and `m_noise` filled in from the dataset.
    pub config: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub data_source: DataSource,
    pub dataset: DatasetFingerprint,
    /// Unix seconds.
    pub started_at: f64,
    pub finished_at: Option<f64>,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> anyhow::Result<Self> {
        let path = run_dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, run_dir: &Path) -> anyhow::Result<()> {
        let path = run_dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// What a finished training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub stats: Vec<EpochStats>,
    pub report: Option<MetricReport>,
}

/// Trains on `source` and fills `out` with manifest, stats, checkpoints and
/// the final metrics.
pub fn train(cfg: &TrainConfig, source: &DataSource, out: &Path) -> anyhow::Result<TrainOutcome> {
    let ds = source.load()?;
    train_on(cfg, &ds, source, out)
}

pub fn train_on(cfg: &TrainConfig, ds: &Dataset, source: &DataSource, out: &Path) -> anyhow::Result<TrainOutcome> {
    let ckpt_dir = out.join(CHECKPOINTS);
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let mut state = ModelState::init(cfg, ds)?;
    let mut manifest = RunManifest {
        config: state.config.clone(),
        config_hash: state.config_hash.clone(),
        seed: state.config.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        data_source: source.clone(),
        dataset: ds.fingerprint(),
        started_at: now(),
        finished_at: None,
    };
    manifest.write(out)?;

    let mut stats_file = BufWriter::new(File::create(out.join(STATS))?);
    let decay_epochs = state.config.lr_decay_epochs.clone();
    let stats = resume(&mut state, ds, |st, s| {
        let line = serde_json::to_string(s).map_err(concurl_core::Error::from)?;
        writeln!(stats_file, "{line}")?;
        stats_file.flush()?;
        if decay_epochs.contains(&s.epoch) {
            st.save(ckpt_dir.join(format!("epoch_{:04}.json", s.epoch)))?;
        }
        Ok(())
    })?;
    drop(stats_file);
    state.save(ckpt_dir.join(FINAL_CHECKPOINT))?;

    let report = if ds.labels().is_some() {
        let r = trainer::evaluate(&state, ds)?;
        r.write_json(out.join(METRICS))?;
        r.write_confusion_csv(out.join(CONFUSION))?;
        Some(r)
    } else {
        None
    };
    manifest.finished_at = Some(now());
    manifest.write(out)?;
    Ok(TrainOutcome { state, stats, report })
}

/// A checkpoint file, or a run directory holding `checkpoints/final.json`.
pub fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINTS).join(FINAL_CHECKPOINT)
    } else {
        path.to_path_buf()
    }
}

pub fn load_checkpoint(path: &Path) -> anyhow::Result<ModelState> {
    let file = checkpoint_path(path);
    ModelState::load(&file).with_context(|| format!("loading checkpoint {}", file.display()))
}

fn check_dims(state: &ModelState, ds: &Dataset) -> anyhow::Result<()> {
    let want = state.params.encoder.input_dim();
    if ds.dim() != want {
        bail!(
            "dimension mismatch: checkpoint expects {want} features, dataset has {}",
            ds.dim()
        );
    }
    Ok(())
}

/// k-means on the extracted features with `k` from the dataset labels.
pub fn eval(checkpoint: &Path, ds: &Dataset, out: Option<&Path>) -> anyhow::Result<MetricReport> {
    let state = load_checkpoint(checkpoint)?;
    check_dims(&state, ds)?;
    let report = trainer::evaluate(&state, ds)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        report.write_json(dir.join(METRICS))?;
        report.write_confusion_csv(dir.join(CONFUSION))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Full-dataset snapshot of the freshly initialized model.
    pub untrained: Diversity,
    /// Full-dataset snapshot of the checkpoint.
    pub checkpoint: Diversity,
    /// `(epoch, mean, std)` from the run's stats, when a run directory is given.
    pub per_epoch: Vec<(usize, f64, f64)>,
}

/// Pairwise-NMI agreement of the ensemble's argmax partitions.
pub fn diversity(path: &Path, ds: &Dataset) -> anyhow::Result<DiversityReport> {
    let state = load_checkpoint(path)?;
    check_dims(&state, ds)?;
    if state.ensemble.len() < 2 {
        bail!("diversity needs an ensemble of at least 2 transforms, checkpoint has {}", state.ensemble.len());
    }
    let snapshot = |s: &ModelState| -> anyhow::Result<Diversity> {
        let (mean, std) = trainer::ensemble_diversity(s, ds)?;
        Ok(Diversity { mean, std })
    };
    let mut fresh_cfg = state.config.clone();
    fresh_cfg.m_noise = fresh_cfg.m_noise.min(ds.len().saturating_sub(1));
    let fresh = ModelState::init(&fresh_cfg, ds)?;
    let mut per_epoch = Vec::new();
    let stats_path = path.join(STATS);
    if path.is_dir() && stats_path.exists() {
        for line in fs::read_to_string(&stats_path)?.lines().filter(|l| !l.trim().is_empty()) {
            let s: EpochStats = serde_json::from_str(line)?;
            if let (Some(m), Some(sd)) = (s.pairwise_nmi_mean, s.pairwise_nmi_std) {
                per_epoch.push((s.epoch, m, sd));
            }
        }
    }
    Ok(DiversityReport {
        untrained: snapshot(&fresh)?,
        checkpoint: snapshot(&state)?,
        per_epoch,
    })
}

pub fn write_diversity(report: &DiversityReport, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("diversity.json"), serde_json::to_string_pretty(report)?)?;
    let mut w = csv::Writer::from_path(dir.join("diversity.csv"))?;
    w.write_record(["source", "epoch", "mean", "std"])?;
    w.write_record(["untrained", "0", &report.untrained.mean.to_string(), &report.untrained.std.to_string()])?;
    for (e, m, s) in &report.per_epoch {
        w.write_record(["training", &e.to_string(), &m.to_string(), &s.to_string()])?;
    }
    w.write_record(["checkpoint", "", &report.checkpoint.mean.to_string(), &report.checkpoint.std.to_string()])?;
    w.flush()?;
    Ok(())
}
