//! Fixed random transformations of the embedding space and the consensus loss.
//!
//! Each transform maps a row embedding `z` (length `d`) to `z·A`. The same map
//! is applied to every prototype, so assignments can be recomputed in the
//! transformed space. The maps are drawn once and never trained.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::normalize_rows;
use crate::rng::{self, Stream};
use crate::softclust::{argmax_rows, soft_assign, AssignmentMatrix, Prototypes};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-30;

const DIAG_LOG_LOW: f64 = -std::f64::consts::LN_10;
const DIAG_LOG_HIGH: f64 = std::f64::consts::LN_10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    GaussianProjection,
    Diagonal,
    /// Projections at even indices, diagonal scalings at odd ones.
    Mixed,
}

impl fmt::Display for EnsembleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleKind::GaussianProjection => "gaussian_projection",
            EnsembleKind::Diagonal => "diagonal",
            EnsembleKind::Mixed => "mixed",
        })
    }
}

impl FromStr for EnsembleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_projection" | "gaussian" | "projection" => Ok(EnsembleKind::GaussianProjection),
            "diagonal" => Ok(EnsembleKind::Diagonal),
            "mixed" => Ok(EnsembleKind::Mixed),
            other => Err(Error::invalid(format!("unknown ensemble kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// `d × d_out` matrix; `z ↦ z·A`.
    Projection(Array2<f64>),
    /// Positive per-coordinate scales; `z ↦ z ⊙ s`.
    Diagonal(Array1<f64>),
}

impl Transform {
    pub fn input_dim(&self) -> usize {
        match self {
            Transform::Projection(a) => a.nrows(),
            Transform::Diagonal(s) => s.len(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Transform::Projection(a) => a.ncols(),
            Transform::Diagonal(s) => s.len(),
        }
    }

    /// Maps the rows of `z` (`B × d`).
    pub fn map_rows(&self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Transform::Projection(a) => z.dot(a),
            Transform::Diagonal(s) => z * s,
        }
    }

    /// Maps the columns of `c` (`d × K`).
    pub fn map_cols(&self, c: &Array2<f64>) -> Array2<f64> {
        match self {
            Transform::Projection(a) => a.t().dot(c),
            Transform::Diagonal(s) => c * &s.view().insert_axis(Axis(1)),
        }
    }

    /// Pulls a gradient w.r.t. mapped rows back to the original rows.
    pub fn pull_rows(&self, g: &Array2<f64>) -> Array2<f64> {
        match self {
            Transform::Projection(a) => g.dot(&a.t()),
            Transform::Diagonal(s) => g * s,
        }
    }

    /// Pulls a gradient w.r.t. mapped columns back to the original columns.
    pub fn pull_cols(&self, g: &Array2<f64>) -> Array2<f64> {
        match self {
            Transform::Projection(a) => a.dot(g),
            Transform::Diagonal(s) => g * &s.view().insert_axis(Axis(1)),
        }
    }
}

/// `M` fixed random maps plus the parameters they were drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformEnsemble {
    pub kind: EnsembleKind,
    pub seed: u64,
    pub d: usize,
    pub d_out: usize,
    pub transforms: Vec<Transform>,
}

impl TransformEnsemble {
    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

/// Draws `m` transforms. Projection entries are iid `N(0, 1/d_out)`;
/// diagonal entries are log-uniform on `[0.1, 10]`.
pub fn init_ensemble(m: usize, kind: EnsembleKind, d: usize, d_out: usize, seed: u64) -> Result<TransformEnsemble> {
    if d < 2 {
        return Err(Error::invalid(format!("ensemble input dim must be >= 2, got {d}")));
    }
    let uses_projection = m > 0 && kind != EnsembleKind::Diagonal;
    if uses_projection && d_out < 2 {
        return Err(Error::invalid(format!("projection dim must be >= 2, got {d_out}")));
    }
    let mut transforms = Vec::with_capacity(m);
    for idx in 0..m {
        let mut rng = rng::stream(seed, Stream::Ensemble, idx as u64);
        let projection = match kind {
            EnsembleKind::GaussianProjection => true,
            EnsembleKind::Diagonal => false,
            EnsembleKind::Mixed => idx % 2 == 0,
        };
        let t = if projection {
            let std = 1.0 / (d_out as f64).sqrt();
            let mut draw = || {
                Array2::from_shape_simple_fn((d, d_out), || {
                    let z: f64 = rng.sample(StandardNormal);
                    std * z
                })
            };
            let mut a = draw();
            let mut tries = 1;
            while matrix_rank(&a) < d.min(d_out) {
                if tries == 8 {
                    return Err(Error::DegenerateTransform {
                        index: idx,
                        detail: "rank-deficient projection".into(),
                    });
                }
                a = draw();
                tries += 1;
            }
            Transform::Projection(a)
        } else {
            Transform::Diagonal(Array1::from_shape_simple_fn(d, || {
                rng.random_range(DIAG_LOG_LOW..=DIAG_LOG_HIGH).exp()
            }))
        };
        transforms.push(t);
    }
    Ok(TransformEnsemble {
        kind,
        seed,
        d,
        d_out,
        transforms,
    })
}

/// Rank by Gaussian elimination with partial pivoting.
pub fn matrix_rank(a: &Array2<f64>) -> usize {
    let mut m = a.clone();
    let (rows, cols) = m.dim();
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = scale * rows.max(cols) as f64 * f64::EPSILON * 16.0;
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows)
            .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
            .unwrap();
        if m[[pivot, col]].abs() <= tol {
            continue;
        }
        for j in 0..cols {
            m.swap([rank, j], [pivot, j]);
        }
        for i in (rank + 1)..rows {
            let f = m[[i, col]] / m[[rank, col]];
            for j in col..cols {
                let v = m[[rank, j]];
                m[[i, j]] -= f * v;
            }
        }
        rank += 1;
    }
    rank
}

/// Normalized transformed embeddings (`B × d_out`) and prototypes (`d_out × K`).
pub fn apply_transform(
    index: usize,
    transform: &Transform,
    z: &Array2<f64>,
    c: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_transform_dims(index, transform, z, c)?;
    let degenerate = |e| as_transform_error(index, e);
    let (zt, _) = normalize_rows(&transform.map_rows(z), "embeddings").map_err(degenerate)?;
    let (ct, _) = normalize_rows(&transform.map_cols(c).t().to_owned(), "prototypes").map_err(degenerate)?;
    Ok((zt, ct.reversed_axes()))
}

fn check_transform_dims(index: usize, t: &Transform, z: &Array2<f64>, c: &Array2<f64>) -> Result<()> {
    if z.ncols() != t.input_dim() || c.nrows() != t.input_dim() {
        return Err(Error::DegenerateTransform {
            index,
            detail: format!(
                "transform expects dim {}, got embeddings {} and prototypes {}",
                t.input_dim(),
                z.ncols(),
                c.nrows()
            ),
        });
    }
    Ok(())
}

/// Soft assignments in every transformed space, one matrix per transform.
pub fn transformed_assignments(
    ens: &TransformEnsemble,
    z: &Array2<f64>,
    protos: &Prototypes,
    tau: f64,
) -> Result<Vec<AssignmentMatrix>> {
    ens.transforms
        .iter()
        .enumerate()
        .map(|(m, t)| {
            check_transform_dims(m, t, z, &protos.c)?;
            let sa = soft_assign(&t.map_rows(z), &t.map_cols(&protos.c), tau)
                .map_err(|e| as_transform_error(m, e))?;
            Ok(AssignmentMatrix { p: sa.p })
        })
        .collect()
}

fn as_transform_error(index: usize, e: Error) -> Error {
    match e {
        Error::DegenerateEmbedding { context, row, norm } => Error::DegenerateTransform {
            index,
            detail: format!("{context} row {row} has norm {norm:e} after mapping"),
        },
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct ConsensusOutput {
    pub loss: f64,
    /// `L¹_m + L²_m` for each transform, in index order.
    pub per_transform: Vec<f64>,
    pub grad_z1: Array2<f64>,
    pub grad_z2: Array2<f64>,
    pub grad_c: Array2<f64>,
    /// Argmax of the view-1 transformed assignments, one vector per transform.
    pub view1_argmax: Vec<Vec<usize>>,
}

/// Swapped-prediction loss summed over the ensemble.
///
/// For each transform, view-1 assignments are scored against the view-2
/// codes and vice versa, each term weighted `1/(2B)`. Codes are constants;
/// gradients are returned for both embedding views and the raw prototypes.
pub fn consensus_loss(
    ens: &TransformEnsemble,
    z1: &Array2<f64>,
    z2: &Array2<f64>,
    protos: &Prototypes,
    q1: &Array2<f64>,
    q2: &Array2<f64>,
    tau: f64,
) -> Result<ConsensusOutput> {
    let b = z1.nrows();
    if z2.dim() != z1.dim() {
        return Err(Error::DimensionMismatch {
            context: "consensus views",
            expected: z1.len(),
            found: z2.len(),
        });
    }
    for q in [q1, q2] {
        if q.dim() != (b, protos.k()) {
            return Err(Error::DimensionMismatch {
                context: "consensus codes",
                expected: b * protos.k(),
                found: q.len(),
            });
        }
    }
    let scale = 1.0 / (2.0 * b as f64);
    let mut out = ConsensusOutput {
        loss: 0.0,
        per_transform: Vec::with_capacity(ens.len()),
        grad_z1: Array2::zeros(z1.dim()),
        grad_z2: Array2::zeros(z2.dim()),
        grad_c: Array2::zeros(protos.c.dim()),
        view1_argmax: Vec::with_capacity(ens.len()),
    };
    for (m, t) in ens.transforms.iter().enumerate() {
        check_transform_dims(m, t, z1, &protos.c)?;
        let ct = t.map_cols(&protos.c);
        let sa1 = soft_assign(&t.map_rows(z1), &ct, tau).map_err(|e| as_transform_error(m, e))?;
        let sa2 = soft_assign(&t.map_rows(z2), &ct, tau).map_err(|e| as_transform_error(m, e))?;
        let (l1, gz1, gc1) = sa1.cross_entropy(q2, scale, PROB_FLOOR)?;
        let (l2, gz2, gc2) = sa2.cross_entropy(q1, scale, PROB_FLOOR)?;
        out.grad_z1 += &t.pull_rows(&gz1);
        out.grad_z2 += &t.pull_rows(&gz2);
        out.grad_c += &t.pull_cols(&(gc1 + gc2));
        let lm = l1 + l2;
        out.view1_argmax.push(argmax_rows(&sa1.p));
        out.per_transform.push(lm);
        out.loss += lm;
    }
    Ok(out)
}
