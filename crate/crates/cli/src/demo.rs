//! Three clusters in the plane: assignment probabilities in the original
//! space, in one randomly projected copy, and the Sinkhorn targets.

use std::fs;
use std::path::Path;

use anyhow::ensure;
use concurl_core::dataio::make_gaussian_blobs;
use concurl_core::ensemble::{init_ensemble, transformed_assignments};
use concurl_core::softclust::{argmax_rows, assignment_probabilities, sinkhorn_codes, SinkhornIters};
use concurl_core::{EnsembleKind, Prototypes};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

pub const TABLE: &str = "synth_demo.csv";
pub const FULL_TABLE: &str = "synth_demo_full.csv";
pub const SUMMARY: &str = "synth_demo_summary.json";

/// Rows whose top-two `p` gap reaches this count as confidently assigned.
pub const CONFIDENT_MARGIN: f64 = 0.9;
/// Rows shown in the headline table.
pub const TABLE_ROWS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub seed: u64,
    pub tau: f64,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            tau: 0.1,
            epsilon: 0.05,
            sinkhorn_iters: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRow {
    pub id: usize,
    pub label: usize,
    pub p: Vec<f64>,
    pub p_tilde: Vec<f64>,
    pub q: Vec<f64>,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub config: DemoConfig,
    pub projection: Vec<Vec<f64>>,
    /// Mean over all rows of `Σ_k |p − p̃| / K`.
    pub mean_abs_row_diff: f64,
    /// Fraction of all rows where `argmax p = argmax p̃`.
    pub argmax_agreement: f64,
    pub confident_rows: usize,
    /// Smallest `max q` among confident rows.
    pub min_confident_q_max: f64,
    /// The headline rows.
    pub table: Vec<DemoRow>,
}

/// Computes every row of the demonstration.
pub fn compute(cfg: &DemoConfig) -> anyhow::Result<(Vec<DemoRow>, DemoSummary)> {
    let ds = make_gaussian_blobs(3, 50, 2, 0.3, 4.0, cfg.seed)?;
    let x = ds.features();
    let labels = ds.labels().expect("blobs are labelled");
    let k = 3;
    let mut centroids = Array2::<f64>::zeros((2, k));
    for c in 0..k {
        let rows: Vec<usize> = (0..ds.len()).filter(|&i| labels[i] == c).collect();
        let mean = x.select(Axis(0), &rows).mean_axis(Axis(0)).expect("non-empty cluster");
        centroids.column_mut(c).assign(&mean);
    }
    let protos = Prototypes::new(centroids)?;
    let ens = init_ensemble(1, EnsembleKind::GaussianProjection, 2, 2, cfg.seed)?;

    let p = assignment_probabilities(x, &protos, cfg.tau)?.p;
    let p_tilde = transformed_assignments(&ens, x, &protos, cfg.tau)?.remove(0).p;
    let q = sinkhorn_codes(x, &protos, cfg.epsilon, SinkhornIters::Fixed(cfg.sinkhorn_iters))?.q_rows;

    let rows: Vec<DemoRow> = (0..ds.len())
        .map(|i| {
            let mut sorted = p.row(i).to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            DemoRow {
                id: i,
                label: labels[i],
                p: p.row(i).to_vec(),
                p_tilde: p_tilde.row(i).to_vec(),
                q: q.row(i).to_vec(),
                margin: sorted[0] - sorted[1],
            }
        })
        .collect();

    let am_p = argmax_rows(&p);
    let am_pt = argmax_rows(&p_tilde);
    let agree = am_p.iter().zip(&am_pt).filter(|(a, b)| a == b).count();
    let mean_abs_row_diff = (&p - &p_tilde).mapv(f64::abs).sum() / (p.len() as f64);
    let confident: Vec<&DemoRow> = rows.iter().filter(|r| r.margin >= CONFIDENT_MARGIN).collect();
    let qmax = |r: &DemoRow| r.q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_confident_q_max = confident.iter().map(|r| qmax(r)).fold(f64::INFINITY, f64::min);

    // first row of each cluster, then the next row of cluster 0
    let mut picks: Vec<usize> = (0..k).filter_map(|c| labels.iter().position(|&l| l == c)).collect();
    if let Some(extra) = (0..ds.len()).find(|&i| labels[i] == 0 && !picks.contains(&i)) {
        picks.push(extra);
    }
    picks.truncate(TABLE_ROWS);
    let table = picks.iter().map(|&i| rows[i].clone()).collect();

    let a = match &ens.transforms[0] {
        concurl_core::ensemble::Transform::Projection(a) => a.rows().into_iter().map(|r| r.to_vec()).collect(),
        concurl_core::ensemble::Transform::Diagonal(d) => vec![d.to_vec()],
    };
    let summary = DemoSummary {
        config: *cfg,
        projection: a,
        mean_abs_row_diff,
        argmax_agreement: agree as f64 / ds.len() as f64,
        confident_rows: confident.len(),
        min_confident_q_max,
        table,
    };
    Ok((rows, summary))
}

/// The structural claims of the demonstration; any violation is an error.
pub fn check(summary: &DemoSummary) -> anyhow::Result<()> {
    for r in &summary.table {
        let s: f64 = r.p.iter().sum();
        ensure!((s - 1.0).abs() < 1e-12, "row {} of p sums to {s}", r.id);
        ensure!(
            argmax(&r.p) == argmax(&r.p_tilde),
            "row {}: argmax p = {} but argmax p~ = {}",
            r.id,
            argmax(&r.p),
            argmax(&r.p_tilde)
        );
        if r.margin >= CONFIDENT_MARGIN {
            let m = r.q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            ensure!(m >= 0.99, "row {}: confident but max q = {m}", r.id);
        }
    }
    ensure!(summary.confident_rows == 0 || summary.min_confident_q_max >= 0.99, "a confident row has max q < 0.99");
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn write_rows(path: &Path, rows: &[DemoRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = rows.first().map_or(0, |r| r.p.len());
    let mut header = vec!["id".to_string(), "label".to_string()];
    for prefix in ["p", "p_tilde", "q"] {
        header.extend((0..k).map(|j| format!("{prefix}{j}")));
    }
    header.push("margin".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.id.to_string(), r.label.to_string()];
        for v in r.p.iter().chain(&r.p_tilde).chain(&r.q) {
            rec.push(format!("{v:e}"));
        }
        rec.push(format!("{}", r.margin));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the headline table, the full table and a JSON summary to `out`.
pub fn run(cfg: &DemoConfig, out: &Path) -> anyhow::Result<DemoSummary> {
    let (rows, summary) = compute(cfg)?;
    check(&summary)?;
    fs::create_dir_all(out)?;
    write_rows(&out.join(TABLE), &summary.table)?;
    write_rows(&out.join(FULL_TABLE), &rows)?;
    fs::write(out.join(SUMMARY), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
