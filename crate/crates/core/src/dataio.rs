//! Datasets, synthetic data, feature-space augmentation, batching and CSV I/O.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream, StreamRng};

/// An indexed collection of fixed-dimension feature vectors.
///
/// Rows are addressed by their id, which is always the row index. Labels are
/// optional and, when present, use every class in `0..num_classes()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Option<Vec<usize>>,
    ids: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        let (n, f) = features.dim();
        if n == 0 {
            return Err(Error::invalid("dataset has no rows"));
        }
        if f == 0 {
            return Err(Error::invalid("dataset has zero feature columns"));
        }
        if let Some((idx, _)) = features.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Parse {
                row: idx / f,
                detail: "non-finite feature value".into(),
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "dataset labels",
                    expected: n,
                    found: labels.len(),
                });
            }
            let k = labels.iter().max().map_or(0, |m| m + 1);
            let mut seen = vec![false; k];
            for &l in labels {
                seen[l] = true;
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::invalid(format!(
                    "label {missing} has no members (labels must cover 0..{k})"
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            ids: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Number of ground-truth classes, if labelled.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn row(&self, id: usize) -> ArrayView1<'_, f64> {
        self.features.row(id)
    }

    /// Row count, dimension and a SHA-256 over the exact feature bits and labels.
    pub fn fingerprint(&self) -> DatasetFingerprint {
        let mut hasher = Sha256::new();
        for v in self.features.iter() {
            hasher.update(v.to_bits().to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            hasher.update(b"labels");
            for &l in labels {
                hasher.update((l as u64).to_le_bytes());
            }
        }
        DatasetFingerprint {
            rows: self.len(),
            dim: self.dim(),
            checksum: hex::encode(hasher.finalize()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub rows: usize,
    pub dim: usize,
    pub checksum: String,
}

/// Parameters of the synthetic isotropic-Gaussian blob generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub k: usize,
    pub n_per_cluster: usize,
    pub dim: usize,
    pub spread: f64,
    pub separation: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn generate(&self) -> Result<Dataset> {
        make_gaussian_blobs(
            self.k,
            self.n_per_cluster,
            self.dim,
            self.spread,
            self.separation,
            self.seed,
        )
    }
}

const CENTER_ATTEMPTS: usize = 10_000;

/// `k` isotropic Gaussian clusters of `n_per_cluster` points each.
///
/// Centers are drawn uniformly from a cube sized so that `k` points at
/// mutual distance `separation` fit comfortably, and rejected until every
/// pair is at least `separation` apart. Rows are ordered cluster by cluster.
pub fn make_gaussian_blobs(
    k: usize,
    n_per_cluster: usize,
    dim: usize,
    spread: f64,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 || n_per_cluster < 2 || dim < 2 {
        return Err(Error::invalid(format!(
            "blobs need k >= 2, n_per_cluster >= 2, dim >= 2 (got {k}, {n_per_cluster}, {dim})"
        )));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!("spread must be positive, got {spread}")));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::invalid(format!(
            "separation must be positive, got {separation}"
        )));
    }

    let mut rng = rng::stream(seed, Stream::Data, 0);
    // cube volume grows like k·separation^dim, so crowded requests fail
    let half_width = 0.5 * separation * (k as f64).powf(1.0 / dim as f64);
    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while centers.len() < k {
        if attempts == CENTER_ATTEMPTS {
            return Err(Error::Infeasible(format!(
                "could not place {k} centers {separation} apart in {dim} dimensions"
            )));
        }
        attempts += 1;
        let candidate: Array1<f64> =
            (0..dim).map(|_| rng.random_range(-half_width..=half_width)).collect();
        let far_enough = centers.iter().all(|c| {
            let d2: f64 = c.iter().zip(&candidate).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= separation
        });
        if far_enough {
            centers.push(candidate);
        }
    }

    let n = k * n_per_cluster;
    let mut features = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for i in 0..n_per_cluster {
            let mut row = features.row_mut(c * n_per_cluster + i);
            for (dst, &mu) in row.iter_mut().zip(center) {
                let z: f64 = rng.sample(StandardNormal);
                *dst = mu + spread * z;
            }
            labels.push(c);
        }
    }
    Dataset::new(features, Some(labels))
}

/// Stochastic perturbation used to produce the two views of each row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Per-coordinate probability of zeroing.
    pub dropout_p: f64,
    /// Half-width of the uniform multiplicative jitter around 1.
    pub scale_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_sigma: 0.1,
            dropout_p: 0.1,
            scale_jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            noise_sigma: 0.0,
            dropout_p: 0.0,
            scale_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.noise_sigma.is_finite()
            && self.noise_sigma >= 0.0
            && self.dropout_p.is_finite()
            && (0.0..1.0).contains(&self.dropout_p)
            && self.scale_jitter.is_finite()
            && self.scale_jitter >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad augmentation config {self:?}")))
        }
    }
}

/// `y = x * jitter + noise`, then each coordinate zeroed with probability `dropout_p`.
///
/// Three draws are consumed per coordinate regardless of the config, so the
/// stream position depends only on the vector length. If every coordinate
/// would be dropped the mask is skipped, since an all-zero view carries no
/// direction to normalize.
pub fn augment_view(x: ArrayView1<'_, f64>, cfg: &AugmentConfig, rng: &mut StreamRng) -> Array1<f64> {
    let mut mask = Vec::with_capacity(x.len());
    let mut y: Array1<f64> = x
        .iter()
        .map(|&v| {
            let u: f64 = rng.random_range(-1.0..=1.0);
            let z: f64 = rng.sample(StandardNormal);
            let drop: f64 = rng.random();
            mask.push(drop < cfg.dropout_p);
            v * (1.0 + cfg.scale_jitter * u) + cfg.noise_sigma * z
        })
        .collect();
    if !mask.iter().all(|&d| d) {
        for (yv, d) in y.iter_mut().zip(mask) {
            if d {
                *yv = 0.0;
            }
        }
    }
    y
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub view1: Array2<f64>,
    pub view2: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// One epoch of augmented batches.
///
/// The id order is a seeded shuffle; a trailing batch shorter than
/// `batch_size` is dropped.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    cfg: AugmentConfig,
    rng: StreamRng,
}

pub fn batch_iterator<'a>(
    ds: &'a Dataset,
    batch_size: usize,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<BatchIter<'a>> {
    if batch_size < 2 || batch_size > ds.len() {
        return Err(Error::invalid(format!(
            "batch size {batch_size} outside [2, {}]",
            ds.len()
        )));
    }
    cfg.validate()?;
    let mut order = ds.ids().to_vec();
    order.shuffle(&mut rng::stream(seed, Stream::Shuffle, 0));
    Ok(BatchIter {
        dataset: ds,
        order,
        batch_size,
        cursor: 0,
        cfg: *cfg,
        rng: rng::stream(seed, Stream::Augment, 0),
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor + self.batch_size > self.order.len() {
            return None;
        }
        let indices = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        let f = self.dataset.dim();
        let mut view1 = Array2::zeros((indices.len(), f));
        let mut view2 = Array2::zeros((indices.len(), f));
        for (r, &id) in indices.iter().enumerate() {
            view1
                .row_mut(r)
                .assign(&augment_view(self.dataset.row(id), &self.cfg, &mut self.rng));
        }
        for (r, &id) in indices.iter().enumerate() {
            view2
                .row_mut(r)
                .assign(&augment_view(self.dataset.row(id), &self.cfg, &mut self.rng));
        }
        Some(Batch {
            indices,
            view1,
            view2,
        })
    }
}

impl BatchIter<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

/// Reads `f0,...,f{F-1}[,label]` CSV. Row numbers in errors are 1-based data rows.
pub fn load_feature_dataset(path: impl AsRef<Path>, has_labels: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let header = reader.headers()?.clone();
    let width = header.len();
    let f = if has_labels { width.saturating_sub(1) } else { width };
    if f == 0 {
        return Err(Error::Parse {
            row: 0,
            detail: "header has no feature columns".into(),
        });
    }
    for (j, name) in header.iter().take(f).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Parse {
                row: 0,
                detail: format!("expected header column f{j}, found {name:?}"),
            });
        }
    }
    if has_labels && header.get(f) != Some("label") {
        return Err(Error::Parse {
            row: 0,
            detail: "expected trailing `label` column".into(),
        });
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != width {
            return Err(Error::Parse {
                row,
                detail: format!("expected {width} cells, found {}", record.len()),
            });
        }
        for cell in record.iter().take(f) {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                detail: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    detail: format!("non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
        if has_labels {
            let cell = &record[f];
            let l: usize = cell.parse().map_err(|_| Error::Parse {
                row,
                detail: format!("label {cell:?} is not a non-negative integer"),
            })?;
            labels.push(l);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse {
            row: 0,
            detail: "file has no data rows".into(),
        });
    }
    let features = Array2::from_shape_vec((rows, f), values)
        .map_err(|e| Error::invalid(e.to_string()))?;
    Dataset::new(features, has_labels.then_some(labels))
}

/// Writes the CSV format read by [`load_feature_dataset`]. Values use the
/// shortest representation that parses back to the same bits.
pub fn save_feature_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    writer.write_record(&header)?;
    for (i, row) in ds.features.axis_iter(Axis(0)).enumerate() {
        let mut record: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if let Some(labels) = &ds.labels {
            record.push(labels[i].to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
