//! Clustering evaluation: Hungarian-matched accuracy, NMI, ARI, k-means,
//! ensemble diversity, confusion tables and nearest-neighbour retrieval.

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Hard cluster labels in `0..k`. Clusters may be empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} outside 0..{k}")));
        }
        Ok(Partition { labels, k })
    }

    /// `k` is one past the largest label.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Partition { labels, k }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn check_lengths(u: &Partition, v: &Partition) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "partition lengths",
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(())
}

/// `u.k × v.k` table of co-occurrence counts.
pub fn contingency(u: &Partition, v: &Partition) -> Result<Array2<usize>> {
    check_lengths(u, v)?;
    let mut t = Array2::zeros((u.k, v.k));
    for (&a, &b) in u.labels.iter().zip(&v.labels) {
        t[[a, b]] += 1;
    }
    Ok(t)
}

/// Minimum-cost assignment for a square cost matrix; `result[row] = column`.
///
/// Shortest augmenting paths with row/column potentials, O(n³). Among equal
/// candidates the lowest column index is taken.
pub fn hungarian_match(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::invalid(format!("cost matrix must be square, got {n}×{m}")));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; index 0 is the virtual source column
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[col_owner[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Hungarian-matched accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub acc: f64,
    /// `permutation[predicted cluster] = true class`.
    pub permutation: Vec<usize>,
    /// Rows are true classes, columns the matched predicted clusters.
    pub matched_confusion: Array2<usize>,
}

/// Accuracy after relabelling predicted clusters to maximize agreement.
/// The smaller side is padded with empty clusters.
pub fn clustering_accuracy(y_true: &Partition, y_pred: &Partition) -> Result<AccuracyResult> {
    check_lengths(y_true, y_pred)?;
    if y_true.is_empty() {
        return Err(Error::invalid("cannot score empty partitions"));
    }
    let k = y_true.k.max(y_pred.k).max(1);
    let mut counts = Array2::<usize>::zeros((k, k));
    for (&t, &p) in y_true.labels.iter().zip(&y_pred.labels) {
        counts[[p, t]] += 1;
    }
    let max = *counts.iter().max().unwrap_or(&0) as f64;
    let cost = counts.mapv(|c| max - c as f64);
    let permutation = hungarian_match(&cost)?;
    let mut matched = Array2::<usize>::zeros((k, k));
    for (&t, &p) in y_true.labels.iter().zip(&y_pred.labels) {
        matched[[t, permutation[p]]] += 1;
    }
    let hits: usize = matched.diag().sum();
    Ok(AccuracyResult {
        acc: hits as f64 / y_true.len() as f64,
        permutation,
        matched_confusion: matched,
    })
}

fn mutual_information(table: &Array2<usize>, n: f64) -> f64 {
    let rows = table.sum_axis(Axis(1));
    let cols = table.sum_axis(Axis(0));
    let mut mi = 0.0;
    for ((i, j), &nij) in table.indexed_iter() {
        if nij == 0 {
            continue;
        }
        let nij = nij as f64;
        mi += nij / n * (n * nij / (rows[i] as f64 * cols[j] as f64)).ln();
    }
    mi
}

/// `MI(U,V) / sqrt(MI(U,U)·MI(V,V))`, natural log. Defined as 0 when either
/// partition has a single non-empty cluster.
pub fn nmi(u: &Partition, v: &Partition) -> Result<f64> {
    check_lengths(u, v)?;
    if u.is_empty() {
        return Err(Error::invalid("NMI of empty partitions"));
    }
    let n = u.len() as f64;
    let muv = mutual_information(&contingency(u, v)?, n);
    let muu = mutual_information(&contingency(u, u)?, n);
    let mvv = mutual_information(&contingency(v, v)?, n);
    let denom = (muu * mvv).sqrt();
    if denom <= 0.0 {
        log::warn!("NMI undefined for a single-cluster partition; reporting 0");
        return Ok(0.0);
    }
    Ok((muv / denom).clamp(0.0, 1.0))
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table.
pub fn ari(u: &Partition, v: &Partition) -> Result<f64> {
    check_lengths(u, v)?;
    if u.len() < 2 {
        return Err(Error::invalid("ARI needs at least two points"));
    }
    let table = contingency(u, v)?;
    let sum_ij: f64 = table.iter().map(|&c| comb2(c)).sum();
    let sum_a: f64 = table.sum_axis(Axis(1)).iter().map(|&c| comb2(c)).sum();
    let sum_b: f64 = table.sum_axis(Axis(0)).iter().map(|&c| comb2(c)).sum();
    let total = comb2(u.len());
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        log::warn!("ARI denominator is zero (trivial partitions)");
        return Ok(if same_partition(u, v) { 1.0 } else { 0.0 });
    }
    Ok((sum_ij - expected) / denom)
}

// Equal up to relabelling.
fn same_partition(u: &Partition, v: &Partition) -> bool {
    let mut fwd = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    u.labels.iter().zip(&v.labels).all(|(&a, &b)| {
        *fwd.entry(a).or_insert(b) == b && *back.entry(b).or_insert(a) == a
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub partition: Partition,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub history: Vec<f64>,
    pub restart: usize,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Best-inertia result over `n_init` k-means++ restarts of Lloyd's algorithm.
/// Restart `r` draws from its own stream; ties go to the earlier restart.
pub fn kmeans(features: &Array2<f64>, k: usize, n_init: usize, max_iter: usize, seed: u64) -> Result<KMeansResult> {
    let n = features.nrows();
    if k == 0 || n < k {
        return Err(Error::invalid(format!("k-means needs 1 <= k <= N (k={k}, N={n})")));
    }
    if n_init == 0 {
        return Err(Error::invalid("k-means needs at least one initialization"));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..n_init {
        let run = lloyd(features, k, max_iter, seed, restart)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

fn kmeans_plus_plus(features: &Array2<f64>, k: usize, rng: &mut rng::StreamRng) -> Array2<f64> {
    let n = features.nrows();
    let mut centroids = Array2::zeros((k, features.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&features.row(first));
    let mut d2: Vec<f64> = features
        .rows()
        .into_iter()
        .map(|x| sq_dist(x, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&features.row(pick));
        for (i, x) in features.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centroids.row(c)));
        }
    }
    centroids
}

fn lloyd(features: &Array2<f64>, k: usize, max_iter: usize, seed: u64, restart: usize) -> Result<KMeansResult> {
    let n = features.nrows();
    let mut rng = rng::stream(seed, Stream::KMeans, restart as u64);
    let mut centroids = kmeans_plus_plus(features, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, x) in features.rows().into_iter().enumerate() {
            let (j, d) = nearest(x, &centroids);
            if j != labels[i] {
                changed = true;
            }
            labels[i] = j;
            dists[i] = d;
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, x) in features.rows().into_iter().enumerate() {
            let mut s = sums.row_mut(labels[i]);
            s += &x;
            counts[labels[i]] += 1;
        }
        for j in 0..k {
            if counts[j] == 0 {
                // reseed from the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= 1");
                let old = labels[far];
                counts[old] -= 1;
                {
                    let mut s = sums.row_mut(old);
                    s -= &features.row(far);
                }
                labels[far] = j;
                dists[far] = 0.0;
                counts[j] = 1;
                sums.row_mut(j).assign(&features.row(far));
                changed = true;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let c = sums.row(j).mapv(|v| v / counts[j] as f64);
                centroids.row_mut(j).assign(&c);
            }
        }
        let inertia: f64 = features
            .rows()
            .into_iter()
            .zip(&labels)
            .map(|(x, &l)| sq_dist(x, centroids.row(l)))
            .sum();
        history.push(inertia);
        if !changed {
            break;
        }
    }
    // final assignment to the final centroids
    let mut inertia = 0.0;
    for (i, x) in features.rows().into_iter().enumerate() {
        let (j, d) = nearest(x, &centroids);
        labels[i] = j;
        inertia += d;
    }
    Ok(KMeansResult {
        partition: Partition { labels, k },
        centroids,
        inertia,
        history,
        restart,
    })
}

/// Per-row argmax of a `B × K` code matrix, ties to the lowest index.
pub fn argmax_assignment(q_rows: &Array2<f64>) -> Partition {
    Partition {
        labels: crate::softclust::argmax_rows(q_rows),
        k: q_rows.ncols(),
    }
}

/// Mean and population standard deviation of NMI over all unordered pairs.
pub fn pairwise_nmi_diversity(assignments: &[Partition]) -> Result<(f64, f64)> {
    if assignments.len() < 2 {
        return Err(Error::invalid(format!(
            "pairwise NMI needs at least two partitions, got {}",
            assignments.len()
        )));
    }
    let mut values = Vec::with_capacity(assignments.len() * (assignments.len() - 1) / 2);
    for a in 0..assignments.len() {
        for b in (a + 1)..assignments.len() {
            values.push(nmi(&assignments[a], &assignments[b])?);
        }
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    Ok((mean, var.sqrt()))
}

/// The `k` rows closest to `query` by cosine distance, excluding the query
/// itself; ties go to the lower id.
pub fn nearest_neighbors(features: &Array2<f64>, query: usize, k: usize) -> Result<Vec<usize>> {
    let n = features.nrows();
    if query >= n {
        return Err(Error::invalid(format!("query {query} out of range for {n} rows")));
    }
    if k >= n {
        return Err(Error::invalid(format!("k = {k} must be below N = {n}")));
    }
    let norm = |r: ArrayView1<'_, f64>| r.dot(&r).sqrt();
    let q = features.row(query);
    let qn = norm(q);
    let mut scored: Vec<(f64, usize)> = features
        .rows()
        .into_iter()
        .enumerate()
        .filter(|&(i, _)| i != query)
        .map(|(i, r)| {
            let denom = qn * norm(r);
            let cos = if denom > 0.0 { q.dot(&r) / denom } else { 0.0 };
            (1.0 - cos, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Row-wise percentages rounded half away from zero. Rows need not sum to 100.
pub fn confusion_percentages(matched_confusion: &Array2<usize>) -> Result<Array2<i64>> {
    let mut out = Array2::zeros(matched_confusion.dim());
    for (i, row) in matched_confusion.rows().into_iter().enumerate() {
        let total: usize = row.sum();
        if total == 0 {
            return Err(Error::invalid(format!("confusion row {i} is empty")));
        }
        for (j, &c) in row.iter().enumerate() {
            out[[i, j]] = (100.0 * c as f64 / total as f64).round() as i64;
        }
    }
    Ok(out)
}

/// Full evaluation of a predicted partition against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub matched_confusion: Array2<usize>,
    pub permutation: Vec<usize>,
}

impl MetricReport {
    pub fn evaluate(y_true: &Partition, y_pred: &Partition) -> Result<Self> {
        let acc = clustering_accuracy(y_true, y_pred)?;
        Ok(MetricReport {
            acc: acc.acc,
            nmi: nmi(y_true, y_pred)?,
            ari: ari(y_true, y_pred)?,
            matched_confusion: acc.matched_confusion,
            permutation: acc.permutation,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Matched confusion counts as CSV, one row per true class.
    pub fn write_confusion_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let k = self.matched_confusion.ncols();
        let mut header = vec!["true_class".to_string()];
        header.extend((0..k).map(|j| format!("cluster{j}")));
        w.write_record(&header)?;
        for (i, row) in self.matched_confusion.rows().into_iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
