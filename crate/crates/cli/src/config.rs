//! Config resolution (flag > file > default) and dataset sources.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::Args;
use concurl_core::dataio::{load_feature_dataset, BlobSpec};
use concurl_core::{Dataset, EnsembleKind, TrainConfig};
use serde::{Deserialize, Serialize};

/// Hyperparameter flags shared by `train` and `sweep`.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub ensemble_size: Option<usize>,
    #[arg(long)]
    pub ensemble_kind: Option<EnsembleKind>,
    #[arg(long)]
    pub proj_dim: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub tau_id: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub tau_cluster: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub sinkhorn_iters: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {
                $(if let Some(v) = self.$f.clone() { cfg.$f = v; })*
            };
        }
        set!(
            seed,
            epochs,
            alpha,
            beta,
            ensemble_size,
            ensemble_kind,
            proj_dim,
            tau_id,
            tau_cluster,
            epsilon,
            sinkhorn_iters,
            lr,
            batch_size
        );
    }
}

/// Parses a flat TOML config. Missing keys keep their defaults.
pub fn parse_config(text: &str) -> anyhow::Result<TrainConfig> {
    toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {}", e.message()))
}

/// Defaults, then the optional file, then the flags. Every validation
/// problem is reported in one error.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse_config(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg);
    let problems = cfg.problems();
    if !problems.is_empty() {
        let list: Vec<String> = problems.iter().map(|p| format!("  - {p}")).collect();
        bail!("config has {} problem(s):\n{}", problems.len(), list.join("\n"));
    }
    Ok(cfg)
}

/// `blobs:k=3,n=50,dim=2[,spread=..,sep=..,seed=..]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec(pub BlobSpec);

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec(BlobSpec {
            k: 10,
            n_per_cluster: 100,
            dim: 32,
            spread: 0.5,
            separation: 8.0,
            seed: 1,
        })
    }
}

impl FromStr for SynthSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let rest = s
            .strip_prefix("blobs")
            .ok_or_else(|| format!("unknown synthetic dataset '{s}' (expected blobs:...)"))?;
        let mut spec = SynthSpec::default().0;
        let rest = rest.strip_prefix(':').unwrap_or(rest);
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| format!("expected key=value, got '{part}'"))?;
            let bad = |_| format!("bad value for {key}: '{value}'");
            match key.trim() {
                "k" => spec.k = value.parse().map_err(bad)?,
                "n" => spec.n_per_cluster = value.parse().map_err(bad)?,
                "dim" => spec.dim = value.parse().map_err(bad)?,
                "spread" => spec.spread = value.parse().map_err(|_| format!("bad value for spread: '{value}'"))?,
                "sep" | "separation" => {
                    spec.separation = value.parse().map_err(|_| format!("bad value for {key}: '{value}'"))?
                }
                "seed" => spec.seed = value.parse().map_err(bad)?,
                other => return Err(format!("unknown blobs key '{other}'")),
            }
        }
        Ok(SynthSpec(spec))
    }
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = &self.0;
        write!(
            f,
            "blobs:k={},n={},dim={},spread={},sep={},seed={}",
            b.k, b.n_per_cluster, b.dim, b.spread, b.separation, b.seed
        )
    }
}

/// Where a dataset came from; recorded in manifests so runs can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    File(PathBuf),
    Synth(String),
}

impl DataSource {
    pub fn from_flags(dataset: Option<&Path>, synth: Option<&SynthSpec>) -> anyhow::Result<Self> {
        match (dataset, synth) {
            (Some(_), Some(_)) => bail!("pass either --dataset or --synth, not both"),
            (Some(p), None) => Ok(DataSource::File(p.to_path_buf())),
            (None, Some(s)) => Ok(DataSource::Synth(s.to_string())),
            (None, None) => bail!("one of --dataset or --synth is required"),
        }
    }

    pub fn load(&self) -> anyhow::Result<Dataset> {
        match self {
            DataSource::File(p) => {
                let header = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?
                    .lines()
                    .next()
                    .unwrap_or_default()
                    .to_string();
                let has_labels = header.split(',').any(|c| c.trim() == "label");
                Ok(load_feature_dataset(p, has_labels).with_context(|| format!("loading {}", p.display()))?)
            }
            DataSource::Synth(s) => {
                let spec: SynthSpec = s.parse().map_err(anyhow::Error::msg)?;
                Ok(spec.0.generate()?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_spec_round_trips() {
        let s: SynthSpec = "blobs:k=3,n=50,dim=2".parse().unwrap();
        assert_eq!((s.0.k, s.0.n_per_cluster, s.0.dim), (3, 50, 2));
        let again: SynthSpec = s.to_string().parse().unwrap();
        assert_eq!(s, again);
        assert!("gauss:k=3".parse::<SynthSpec>().is_err());
        assert!("blobs:k=x".parse::<SynthSpec>().is_err());
        assert!("blobs:q=1".parse::<SynthSpec>().is_err());
    }

    #[test]
    fn config_file_keeps_defaults_for_missing_keys() {
        let cfg = parse_config("alpha = 0.5\nlr_decay_epochs = [10, 20]\n").unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.lr_decay_epochs, vec![10, 20]);
        assert_eq!(cfg.beta, TrainConfig::default().beta);
        assert!(parse_config("not_a_key = 1").is_err());
    }
}
