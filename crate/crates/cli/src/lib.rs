//! Command-line experiment runner for consensus clustering.

pub mod config;
pub mod demo;
pub mod run;
pub mod sweep;

use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use config::{resolve_config, DataSource, Overrides, SynthSpec};

// stdout may be a closed pipe (`concurl eval ... | head`); that is not an error
macro_rules! say {
    ($($t:tt)*) => {
        match writeln!(std::io::stdout().lock(), $($t)*) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
            _ => {}
        }
    };
}

#[derive(Debug, Parser)]
#[command(name = "concurl", version, about = "Consensus clustering on feature vectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct DataArgs {
    /// CSV with columns f0..f{F-1} and an optional `label` column.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Synthetic blobs, e.g. `blobs:k=3,n=50,dim=2,spread=0.3,sep=4,seed=7`.
    #[arg(long)]
    pub synth: Option<SynthSpec>,
}

impl DataArgs {
    pub fn source(&self) -> anyhow::Result<DataSource> {
        DataSource::from_flags(self.dataset.as_deref(), self.synth.as_ref())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a self-describing run directory.
    Train {
        /// Flat TOML file with any subset of the training options.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Cluster a dataset with a trained checkpoint and report ACC/NMI/ARI.
    Eval {
        /// Checkpoint file or run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per point of a hyperparameter grid.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated ID temperatures.
        #[arg(long, value_delimiter = ',')]
        tau_id_grid: Vec<f64>,
        /// Comma-separated learning rates.
        #[arg(long, value_delimiter = ',')]
        lr_grid: Vec<f64>,
        /// Comma-separated ensemble sizes (0 gives the instance-discrimination baseline).
        #[arg(long, value_delimiter = ',')]
        ensemble_size_grid: Vec<usize>,
        /// Comma-separated natural-log ensemble sizes; M = round(e^η).
        #[arg(long, value_delimiter = ',')]
        log_ensemble_size_grid: Vec<f64>,
        /// Comma-separated projection dimensions.
        #[arg(long, value_delimiter = ',')]
        proj_dim_grid: Vec<usize>,
        /// Concurrent trials.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Three planar clusters: p, p̃ under a random projection, and Sinkhorn q.
    SynthDemo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Pairwise-NMI agreement of the ensemble's partitions.
    Diversity {
        /// Checkpoint file or run directory (which adds the per-epoch series).
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            overrides,
        } => {
            let cfg = resolve_config(config.as_deref(), &overrides)?;
            let outcome = run::train(&cfg, &data.source()?, &out)?;
            match &outcome.report {
                Some(r) => say!("acc {:.4} nmi {:.4} ari {:.4}", r.acc, r.nmi, r.ari),
                None => say!("trained {} epochs (no labels to evaluate)", outcome.state.epoch),
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let ds = data.source()?.load()?;
            let report = run::eval(&checkpoint, &ds, out.as_deref())?;
            say!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Sweep {
            config,
            data,
            out,
            overrides,
            tau_id_grid,
            lr_grid,
            ensemble_size_grid,
            log_ensemble_size_grid,
            proj_dim_grid,
            workers,
        } => {
            let base = resolve_config(config.as_deref(), &overrides)?;
            let mut sizes = ensemble_size_grid;
            sizes.extend(sweep::sizes_from_log(&log_ensemble_size_grid));
            let grid = sweep::SweepGrid {
                tau_id: tau_id_grid,
                lr: lr_grid,
                ensemble_size: sizes,
                proj_dim: proj_dim_grid,
            };
            let results = sweep::run_sweep(&base, &grid, &data.source()?, &out, workers)?;
            let failed = results.iter().filter(|r| r.error.is_some()).count();
            say!("{} trials, {failed} failed; summary in {}", results.len(), out.join(sweep::SUMMARY).display());
        }
        Command::SynthDemo { out, seed } => {
            let cfg = demo::DemoConfig {
                seed,
                ..demo::DemoConfig::default()
            };
            let s = demo::run(&cfg, &out).context("synthetic demonstration")?;
            say!(
                "argmax agreement {:.3}, mean |p - p~| {:.4}, {} confident rows with max q >= {:.6}",
                s.argmax_agreement, s.mean_abs_row_diff, s.confident_rows, s.min_confident_q_max
            );
        }
        Command::Diversity { checkpoint, data, out } => {
            let ds = data.source()?.load()?;
            let report = run::diversity(&checkpoint, &ds)?;
            if let Some(dir) = out {
                run::write_diversity(&report, &dir)?;
            }
            say!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
