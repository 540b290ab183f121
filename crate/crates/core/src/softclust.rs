//! Prototype-based soft assignments and Sinkhorn-Knopp target codes.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normalize_rows, normalize_rows_backward};
use crate::rng::{self, Stream};

/// Cluster prototypes stored as the columns of a `d × K` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub c: Array2<f64>,
}

impl Prototypes {
    pub fn new(c: Array2<f64>) -> Result<Self> {
        if c.ncols() < 2 || c.nrows() < 1 {
            return Err(Error::invalid(format!(
                "prototypes need K >= 2 columns, got {:?}",
                c.dim()
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototypes".into()));
        }
        Ok(Prototypes { c })
    }

    pub fn k(&self) -> usize {
        self.c.ncols()
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    /// Column-normalized copy, `d × K`.
    pub fn normalized(&self) -> Result<Array2<f64>> {
        let (ct, _) = normalize_rows(&self.c.t().to_owned(), "prototypes")?;
        Ok(ct.reversed_axes())
    }
}

/// Standard-normal prototypes drawn from the seed's prototype stream.
pub fn init_prototypes(k: usize, d: usize, seed: u64) -> Result<Prototypes> {
    if k < 2 || d < 2 {
        return Err(Error::invalid(format!("prototypes need k >= 2 and d >= 2 (got {k}, {d})")));
    }
    let mut rng = rng::stream(seed, Stream::Prototypes, 0);
    Prototypes::new(Array2::from_shape_simple_fn((d, k), || rng.sample(StandardNormal)))
}

/// Row-stochastic `B × K` matrix of soft cluster assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub p: Array2<f64>,
}

impl AssignmentMatrix {
    pub fn argmax(&self) -> Vec<usize> {
        argmax_rows(&self.p)
    }
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

fn check_dims(z: &Array2<f64>, c: &Array2<f64>) -> Result<()> {
    if z.ncols() != c.nrows() {
        return Err(Error::DimensionMismatch {
            context: "embedding vs prototype dimension",
            expected: c.nrows(),
            found: z.ncols(),
        });
    }
    Ok(())
}

/// Everything the backward pass of a soft assignment needs.
#[derive(Debug, Clone)]
pub struct SoftAssignment {
    z_bar: Array2<f64>,
    z_norms: Array1<f64>,
    /// `K × d`: normalized prototypes as rows.
    c_bar_rows: Array2<f64>,
    c_norms: Array1<f64>,
    tau: f64,
    pub log_p: Array2<f64>,
    pub p: Array2<f64>,
}

/// Softmax over `⟨z̄_i, c̄_j⟩ / τ`, with `z` given as `B × d` rows and the
/// prototypes as the columns of a `d × K` matrix.
pub fn soft_assign(z: &Array2<f64>, c: &Array2<f64>, tau: f64) -> Result<SoftAssignment> {
    check_tau(tau)?;
    check_dims(z, c)?;
    let (z_bar, z_norms) = normalize_rows(z, "embeddings")?;
    let (c_bar_rows, c_norms) = normalize_rows(&c.t().to_owned(), "prototypes")?;
    let logits = z_bar.dot(&c_bar_rows.t()) / tau;
    let log_p = log_softmax_rows(&logits);
    let p = log_p.mapv(f64::exp);
    Ok(SoftAssignment {
        z_bar,
        z_norms,
        c_bar_rows,
        c_norms,
        tau,
        log_p,
        p,
    })
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl SoftAssignment {
    /// `−scale · Σ_ij q_ij · max(log p_ij, log floor)` and its gradients with
    /// respect to the raw embeddings (`B × d`) and raw prototypes (`d × K`).
    /// Targets are constants.
    pub fn cross_entropy(
        &self,
        targets: &Array2<f64>,
        scale: f64,
        floor: f64,
    ) -> Result<(f64, Array2<f64>, Array2<f64>)> {
        if targets.dim() != self.p.dim() {
            return Err(Error::DimensionMismatch {
                context: "targets vs assignments",
                expected: self.p.len(),
                found: targets.len(),
            });
        }
        let log_floor = floor.ln();
        let mut loss = 0.0;
        // masked targets: entries clamped at the floor pass no gradient
        let mut q_live = targets.clone();
        for ((q, ql), &lp) in targets.iter().zip(q_live.iter_mut()).zip(self.log_p.iter()) {
            if lp > log_floor {
                loss -= q * lp;
            } else {
                loss -= q * log_floor;
                *ql = 0.0;
            }
        }
        loss *= scale;

        // dL/dlogit_ik = −scale (q'_ik − p_ik Σ_j q'_ij)
        let live_mass = q_live.sum_axis(Axis(1));
        let mut g_logits = &self.p * &live_mass.insert_axis(Axis(1));
        g_logits -= &q_live;
        g_logits *= scale / self.tau;

        let g_zbar = g_logits.dot(&self.c_bar_rows);
        let g_cbar_rows = g_logits.t().dot(&self.z_bar);
        let gz = normalize_rows_backward(&self.z_bar, &self.z_norms, &g_zbar);
        let gc = normalize_rows_backward(&self.c_bar_rows, &self.c_norms, &g_cbar_rows).reversed_axes();
        Ok((loss, gz, gc))
    }
}

/// Soft assignments of `B × d` embeddings to the prototypes at temperature `tau`.
pub fn assignment_probabilities(z: &Array2<f64>, protos: &Prototypes, tau: f64) -> Result<AssignmentMatrix> {
    Ok(AssignmentMatrix {
        p: soft_assign(z, &protos.c, tau)?.p,
    })
}

/// Sinkhorn iteration budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SinkhornIters {
    /// Exactly this many row/column rounds.
    Fixed(usize),
    /// Iterate until the row-marginal residual is at most `tol`, up to `max_iters` rounds.
    Converge { tol: f64, max_iters: usize },
}

impl SinkhornIters {
    pub const CONVERGE: SinkhornIters = SinkhornIters::Converge {
        tol: 1e-9,
        max_iters: 1000,
    };
}

/// Equipartitioned codes on the transportation polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    /// `K × B`; rows sum to `1/K`, columns to `1/B`.
    pub q: Array2<f64>,
    /// `B × K`; `Qᵀ` scaled by `B`, so each row sums to one.
    pub q_rows: Array2<f64>,
    pub iterations: usize,
}

impl CodeMatrix {
    /// `‖Q1_B − (1/K)1_K‖_∞`
    pub fn row_residual(&self) -> f64 {
        marginal_residual(&self.q, Axis(1), 1.0 / self.q.nrows() as f64)
    }

    /// `‖Qᵀ1_K − (1/B)1_B‖_∞`
    pub fn col_residual(&self) -> f64 {
        marginal_residual(&self.q, Axis(0), 1.0 / self.q.ncols() as f64)
    }
}

fn marginal_residual(q: &Array2<f64>, axis: Axis, target: f64) -> f64 {
    q.sum_axis(axis)
        .iter()
        .fold(0.0, |m: f64, &s| m.max((s - target).abs()))
}

/// Codes for `B × d` embeddings: Sinkhorn on the cosine score matrix `C̄ᵀZ̄`.
pub fn sinkhorn_codes(
    z: &Array2<f64>,
    protos: &Prototypes,
    epsilon: f64,
    iters: SinkhornIters,
) -> Result<CodeMatrix> {
    check_dims(z, &protos.c)?;
    let (z_bar, _) = normalize_rows(z, "embeddings")?;
    let c_bar = protos.normalized()?;
    let scores = c_bar.t().dot(&z_bar.t());
    sinkhorn_from_scores(&scores, epsilon, iters)
}

/// Maximizer of `Tr(QᵀS) + εH(Q)` over the polytope for a `K × B` score matrix.
///
/// Starts from `exp((S − max S)/ε)` and alternates row scaling to `1/K` and
/// column scaling to `1/B`, always finishing on a column scaling.
pub fn sinkhorn_from_scores(scores: &Array2<f64>, epsilon: f64, iters: SinkhornIters) -> Result<CodeMatrix> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let (k, b) = scores.dim();
    if k < 1 || b < 1 {
        return Err(Error::invalid("empty score matrix"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sinkhorn scores".into()));
    }
    if b < k {
        log::warn!("sinkhorn with batch {b} smaller than cluster count {k}");
    }
    let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut q = scores.mapv(|s| ((s - max) / epsilon).exp());
    let total = q.sum();
    q /= total;

    let row_target = 1.0 / k as f64;
    let col_target = 1.0 / b as f64;
    let (rounds, tol) = match iters {
        SinkhornIters::Fixed(n) => (n, None),
        SinkhornIters::Converge { tol, max_iters } => (max_iters, Some(tol)),
    };
    let mut done = 0;
    while done < rounds {
        scale_axis(&mut q, Axis(1), row_target, "row")?;
        scale_axis(&mut q, Axis(0), col_target, "column")?;
        done += 1;
        if let Some(tol) = tol {
            if marginal_residual(&q, Axis(1), row_target) <= tol {
                break;
            }
        }
    }
    if done == 0 {
        // still report a matrix whose columns are on the polytope
        scale_axis(&mut q, Axis(0), col_target, "column")?;
    }
    if let Some(tol) = tol {
        if marginal_residual(&q, Axis(1), row_target) > tol {
            // alternating scaling crawls when the optimum is near the boundary
            let logits = scores.mapv(|s| (s - max) / epsilon);
            q = newton_polish(&logits, tol)?;
        }
    }
    let q_rows = q.t().mapv(|v| v * b as f64);
    Ok(CodeMatrix {
        q,
        q_rows,
        iterations: done,
    })
}

const NEWTON_MAX_STEPS: usize = 200;

/// Same fixed point as the scaling iteration, found by damped Newton on the
/// row potentials `u` of `f(u) = (1/B)Σ_j lse_i(u_i + L_ij) − (1/K)Σ_i u_i`.
/// Columns are closed by a softmax, so they stay exactly on the polytope.
fn newton_polish(logits: &Array2<f64>, tol: f64) -> Result<Array2<f64>> {
    let (k, b) = logits.dim();
    let kf = k as f64;
    let bf = b as f64;
    let columns = |u: &Array1<f64>| -> (Array2<f64>, f64) {
        let mut p = logits + &u.view().insert_axis(Axis(1));
        let mut lse_sum = 0.0;
        for mut col in p.columns_mut() {
            let m = col.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            col.mapv_inplace(|v| (v - m).exp());
            let z = col.sum();
            col /= z;
            lse_sum += m + z.ln();
        }
        (p, lse_sum / bf - u.sum() / kf)
    };
    let mut u = Array1::<f64>::zeros(k);
    let (mut p, mut f) = columns(&u);
    for _ in 0..NEWTON_MAX_STEPS {
        let g = p.sum_axis(Axis(1)) / bf - 1.0 / kf;
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= 0.5 * tol {
            break;
        }
        let mut h = Array2::<f64>::from_elem((k, k), 1.0 / kf);
        for col in p.columns() {
            for i in 0..k {
                h[[i, i]] += col[i] / bf;
                for l in 0..k {
                    h[[i, l]] -= col[i] * col[l] / bf;
                }
            }
        }
        let ridge = 1e-14 * h.diag().fold(0.0f64, |m, &v| m.max(v));
        for i in 0..k {
            h[[i, i]] += ridge;
        }
        let step = solve(h, -&g).ok_or_else(|| Error::NumericalDegeneracy("sinkhorn newton system".into()))?;
        let slope = g.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &u + &(&step * t);
            let (pc, fc) = columns(&cand);
            if fc <= f + 1e-4 * t * slope || t < 1e-10 {
                u = cand;
                p = pc;
                f = fc;
                break;
            }
            t *= 0.5;
        }
    }
    Ok(p / bf)
}

// Gaussian elimination with partial pivoting; None if singular.
fn solve(mut a: Array2<f64>, mut rhs: Array1<f64>) -> Option<Array1<f64>> {
    let n = rhs.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&x, &y| a[[x, c]].abs().total_cmp(&a[[y, c]].abs()))?;
        if a[[piv, c]] == 0.0 || !a[[piv, c]].is_finite() {
            return None;
        }
        if piv != c {
            for j in 0..n {
                a.swap([c, j], [piv, j]);
            }
            rhs.swap(c, piv);
        }
        for r in c + 1..n {
            let factor = a[[r, c]] / a[[c, c]];
            if factor != 0.0 {
                for j in c..n {
                    a[[r, j]] -= factor * a[[c, j]];
                }
                rhs[r] -= factor * rhs[c];
            }
        }
    }
    let mut x = Array1::<f64>::zeros(n);
    for r in (0..n).rev() {
        let acc: f64 = (r + 1..n).map(|j| a[[r, j]] * x[j]).sum();
        x[r] = (rhs[r] - acc) / a[[r, r]];
    }
    Some(x)
}

// Scales each row (Axis(1) sums) or column (Axis(0) sums) to `target`.
fn scale_axis(q: &mut Array2<f64>, axis: Axis, target: f64, what: &str) -> Result<()> {
    let sums = q.sum_axis(axis);
    if let Some(i) = sums.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::NumericalDegeneracy(format!(
            "sinkhorn {what} {i} has mass {} after exponentiation",
            sums[i]
        )));
    }
    let factors = sums.mapv(|s| target / s);
    if axis == Axis(1) {
        *q *= &factors.insert_axis(Axis(1));
    } else {
        *q *= &factors.insert_axis(Axis(0));
    }
    Ok(())
}
