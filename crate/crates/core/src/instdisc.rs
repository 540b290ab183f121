//! Instance discrimination with a memory bank and NCE against uniform noise.
//!
//! The bank holds one unit-norm feature per dataset row. The probability that
//! a feature `f` is recognised as row `i` is a softmax over all bank rows at
//! temperature `tau_id`; the partition function is computed exactly.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normalize_rows, TINY_NORM};
use crate::rng::{self, Stream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub bank: Array2<f64>,
    pub momentum: f64,
    pub tau_id: f64,
    pub m_noise: usize,
}

impl MemoryBank {
    /// Random unit rows drawn from the seed's bank stream.
    pub fn init(n: usize, dim: usize, momentum: f64, tau_id: f64, m_noise: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, Stream::Bank, 0);
        let raw = Array2::from_shape_simple_fn((n, dim), || rng.sample(StandardNormal));
        let (bank, _) = normalize_rows(&raw, "memory bank")?;
        MemoryBank::from_rows(bank, momentum, tau_id, m_noise)
    }

    pub fn from_rows(bank: Array2<f64>, momentum: f64, tau_id: f64, m_noise: usize) -> Result<Self> {
        let n = bank.nrows();
        if n < 2 {
            return Err(Error::invalid("memory bank needs at least two rows"));
        }
        if !(0.0..1.0).contains(&momentum) && momentum != 1.0 {
            return Err(Error::invalid(format!("bank momentum {momentum} outside [0, 1]")));
        }
        if !(tau_id > 0.0 && tau_id.is_finite()) {
            return Err(Error::invalid(format!("tau_id must be positive, got {tau_id}")));
        }
        if m_noise == 0 || m_noise >= n {
            return Err(Error::invalid(format!(
                "noise count {m_noise} must be in [1, {}] for a bank of {n} rows",
                n - 1
            )));
        }
        Ok(MemoryBank {
            bank,
            momentum,
            tau_id,
            m_noise,
        })
    }

    pub fn len(&self) -> usize {
        self.bank.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.bank.ncols()
    }

    fn check_id(&self, i: usize) -> Result<()> {
        if i < self.len() {
            Ok(())
        } else {
            Err(Error::invalid(format!("id {i} out of range for bank of {}", self.len())))
        }
    }

    /// `P(·|f)` over every bank row.
    pub fn probabilities(&self, f: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if f.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "bank feature",
                expected: self.dim(),
                found: f.len(),
            });
        }
        let scores = self.bank.dot(&f);
        Ok(softmax(scores.view(), self.tau_id))
    }

    /// `P(i|f)` with an exact partition function.
    pub fn id_probability(&self, f: ArrayView1<'_, f64>, i: usize) -> Result<f64> {
        self.check_id(i)?;
        Ok(self.probabilities(f)?[i])
    }
}

fn softmax(scores: ArrayView1<'_, f64>, tau: f64) -> Array1<f64> {
    let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut e = scores.mapv(|s| ((s - max) / tau).exp());
    let total = e.sum();
    e /= total;
    e
}

/// For every sample, `m` ids drawn uniformly from the other rows (with replacement).
pub fn draw_noise(ids: &[usize], m: usize, n: usize, rng: &mut StreamRng) -> Result<Vec<Vec<usize>>> {
    if n < 2 || m >= n {
        return Err(Error::invalid(format!("cannot draw {m} noise ids from {n} rows")));
    }
    ids.iter()
        .map(|&own| {
            if own >= n {
                return Err(Error::invalid(format!("id {own} out of range for {n} rows")));
            }
            Ok((0..m)
                .map(|_| {
                    let r = rng.random_range(0..n - 1);
                    if r >= own {
                        r + 1
                    } else {
                        r
                    }
                })
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct NceOutput {
    /// Batch mean of `data_term + noise_term`.
    pub loss: f64,
    /// Batch mean of `−log h(i, f)`.
    pub data_term: f64,
    /// Batch mean of `−Σ log(1 − h(x', f))` over the noise draws.
    pub noise_term: f64,
    /// Gradient with respect to the (normalized) input features.
    pub grad_feats: Array2<f64>,
}

/// NCE loss with noise drawn from `rng`.
pub fn nce_loss(bank: &MemoryBank, feats: &Array2<f64>, ids: &[usize], rng: &mut StreamRng) -> Result<NceOutput> {
    let noise = draw_noise(ids, bank.m_noise, bank.len(), rng)?;
    nce_loss_with_noise(bank, feats, ids, &noise)
}

/// NCE loss for given noise draws.
///
/// With `c = m/N`, `h(j, f) = P(j|f) / (P(j|f) + c)`. Each sample contributes
/// `−log h(own, f) − Σ_{x'} log(1 − h(x', f))`.
pub fn nce_loss_with_noise(
    bank: &MemoryBank,
    feats: &Array2<f64>,
    ids: &[usize],
    noise: &[Vec<usize>],
) -> Result<NceOutput> {
    let b = feats.nrows();
    if ids.len() != b || noise.len() != b {
        return Err(Error::DimensionMismatch {
            context: "nce batch",
            expected: b,
            found: ids.len().min(noise.len()),
        });
    }
    if feats.ncols() != bank.dim() {
        return Err(Error::DimensionMismatch {
            context: "nce feature width",
            expected: bank.dim(),
            found: feats.ncols(),
        });
    }
    let n = bank.len();
    let c = bank.m_noise as f64 / n as f64;
    let tau = bank.tau_id;
    let scores = feats.dot(&bank.bank.t());

    let mut data_term = 0.0;
    let mut noise_term = 0.0;
    let mut g_scores = Array2::<f64>::zeros((b, n));
    for (row, (&own, draws)) in ids.iter().zip(noise).enumerate() {
        bank.check_id(own)?;
        let p = softmax(scores.row(row), tau);
        // a_j = dL/dP_j, sparse over own id and noise draws
        let mut touched: Vec<(usize, f64)> = Vec::with_capacity(draws.len() + 1);
        let pi = p[own];
        data_term += (c / pi).ln_1p();
        touched.push((own, -c / (pi * (pi + c))));
        for &j in draws {
            bank.check_id(j)?;
            let pj = p[j];
            noise_term += (pj / c).ln_1p();
            touched.push((j, 1.0 / (pj + c)));
        }
        // dL/ds_k = P_k (a_k − Σ_j a_j P_j) / τ
        let weighted: f64 = touched.iter().map(|&(j, a)| a * p[j]).sum();
        let mut g = g_scores.row_mut(row);
        g.assign(&p.mapv(|pk| -pk * weighted));
        for &(j, a) in &touched {
            g[j] += a * p[j];
        }
        g.mapv_inplace(|v| v / tau);
    }
    let inv_b = 1.0 / b as f64;
    let grad_feats = g_scores.dot(&bank.bank) * inv_b;
    Ok(NceOutput {
        loss: (data_term + noise_term) * inv_b,
        data_term: data_term * inv_b,
        noise_term: noise_term * inv_b,
        grad_feats,
    })
}

/// `row_i ← normalize(μ·row_i + (1 − μ)·f_i)` for each id, in batch order.
pub fn bank_update(bank: &mut MemoryBank, feats: &Array2<f64>, ids: &[usize], momentum: f64) -> Result<()> {
    if feats.nrows() != ids.len() || feats.ncols() != bank.dim() {
        return Err(Error::DimensionMismatch {
            context: "bank update",
            expected: ids.len() * bank.dim(),
            found: feats.len(),
        });
    }
    for (f, &id) in feats.axis_iter(Axis(0)).zip(ids) {
        bank.check_id(id)?;
        let mut row = bank.bank.row_mut(id);
        let mixed = &row * momentum + &f * (1.0 - momentum);
        let norm = mixed.dot(&mixed).sqrt();
        if norm > TINY_NORM {
            row.assign(&(mixed / norm));
        } else {
            // exact cancellation: fall back to the new feature's direction
            let fnorm = f.dot(&f).sqrt();
            if fnorm > TINY_NORM {
                row.assign(&f.mapv(|v| v / fnorm));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_rows(rows: usize, cols: usize, rng: &mut StreamRng) -> Array2<f64> {
        let raw = Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal));
        normalize_rows(&raw, "test").unwrap().0
    }

    #[test]
    fn symmetric_bank_gives_uniform_probability() {
        let row = array![0.6, 0.8];
        let bank = MemoryBank::from_rows(Array2::from_shape_fn((5, 2), |(_, j)| row[j]), 0.5, 0.5, 2).unwrap();
        for i in 0..5 {
            let p = bank.id_probability(array![0.0, 1.0].view(), i).unwrap();
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn two_row_closed_form() {
        let bank = MemoryBank::from_rows(array![[1.0, 0.0], [0.0, 1.0]], 0.5, 0.5, 1).unwrap();
        let p = bank.id_probability(array![1.0, 0.0].view(), 0).unwrap();
        let e2 = 2f64.exp();
        assert!((p - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p - 0.8808).abs() < 1e-4);
        assert!(bank.id_probability(array![1.0, 0.0].view(), 2).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = rng::stream(1, Stream::Init, 0);
        for _ in 0..20 {
            let bank = MemoryBank::from_rows(unit_rows(30, 6, &mut rng), 0.5, 0.3, 5).unwrap();
            let f = unit_rows(1, 6, &mut rng);
            let total: f64 = bank.probabilities(f.row(0)).unwrap().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_point_closed_form() {
        // every bank row equal: P(i|f) = 1/N for any f
        let n = 16;
        let m = 5;
        let bank = MemoryBank::from_rows(Array2::from_shape_fn((n, 3), |(_, j)| [0.0, 0.0, 1.0][j]), 0.5, 0.5, m).unwrap();
        let mut rng = rng::stream(2, Stream::Init, 0);
        let feats = unit_rows(4, 3, &mut rng);
        let out = nce_loss(&bank, &feats, &[0, 3, 7, 15], &mut rng::stream(9, Stream::Noise, 0)).unwrap();
        let mf = m as f64;
        let want = (1.0 + mf).ln() + mf * (1.0 + 1.0 / mf).ln();
        assert!((out.loss - want).abs() < 1e-9, "{} vs {want}", out.loss);
        assert!(out.data_term >= 0.0 && out.noise_term >= 0.0);
    }

    #[test]
    fn confident_self_recognition_leaves_only_the_noise_ratio() {
        // own row aligned with f, all others anti-aligned; -log h tends to log(1 + m/N)
        let confident = |n: usize, m: usize| {
            let mut bank_rows = Array2::from_elem((n, 2), 0.0);
            bank_rows.row_mut(0).assign(&array![1.0, 0.0]);
            for i in 1..n {
                bank_rows.row_mut(i).assign(&array![-1.0, 0.0]);
            }
            let bank = MemoryBank::from_rows(bank_rows, 0.5, 0.02, m).unwrap();
            let noise = vec![(1..=m).collect()];
            nce_loss_with_noise(&bank, &array![[1.0, 0.0]], &[0], &noise).unwrap().data_term
        };
        let d = confident(8, 3);
        assert!((d - (1.0f64 + 3.0 / 8.0).ln()).abs() < 1e-12, "{d}");
        let big = confident(100_000, 1);
        assert!(big < 1.1e-5, "{big}");
    }

    #[test]
    fn rejects_too_many_noise_samples() {
        let mut rng = rng::stream(3, Stream::Init, 0);
        assert!(MemoryBank::from_rows(unit_rows(4, 2, &mut rng), 0.5, 0.5, 4).is_err());
        assert!(MemoryBank::from_rows(unit_rows(4, 2, &mut rng), 0.5, 0.5, 3).is_ok());
    }

    #[test]
    fn noise_draws_exclude_own_id_and_are_deterministic() {
        let ids = [0, 5, 9];
        let a = draw_noise(&ids, 9, 10, &mut rng::stream(4, Stream::Noise, 0)).unwrap();
        let b = draw_noise(&ids, 9, 10, &mut rng::stream(4, Stream::Noise, 0)).unwrap();
        assert_eq!(a, b);
        for (own, draws) in ids.iter().zip(&a) {
            assert!(draws.iter().all(|d| d != own && *d < 10));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng::stream(5, Stream::Init, 0);
        let bank = MemoryBank::from_rows(unit_rows(8, 4, &mut rng), 0.5, 0.5, 3).unwrap();
        let feats = unit_rows(4, 4, &mut rng);
        let ids = [1, 3, 4, 7];
        let noise = draw_noise(&ids, 3, 8, &mut rng).unwrap();
        let out = nce_loss_with_noise(&bank, &feats, &ids, &noise).unwrap();
        let h = 1e-6;
        for ((i, j), &g) in out.grad_feats.indexed_iter() {
            let (mut p, mut m) = (feats.clone(), feats.clone());
            p[[i, j]] += h;
            m[[i, j]] -= h;
            let fd = (nce_loss_with_noise(&bank, &p, &ids, &noise).unwrap().loss
                - nce_loss_with_noise(&bank, &m, &ids, &noise).unwrap().loss)
                / (2.0 * h);
            assert!((fd - g).abs() <= 1e-4 * fd.abs().max(1e-4), "{fd} vs {g}");
        }
    }

    #[test]
    fn bank_update_momentum_extremes() {
        let mut rng = rng::stream(6, Stream::Init, 0);
        let rows = unit_rows(5, 3, &mut rng);
        let f = array![[0.0, 3.0, 4.0]];
        let mut bank = MemoryBank::from_rows(rows.clone(), 0.5, 0.5, 2).unwrap();
        bank_update(&mut bank, &f, &[2], 0.0).unwrap();
        assert_eq!(bank.bank.row(2), array![0.0, 0.6, 0.8]);
        let mut frozen = MemoryBank::from_rows(rows.clone(), 0.5, 0.5, 2).unwrap();
        bank_update(&mut frozen, &f, &[2], 1.0).unwrap();
        for (a, b) in frozen.bank.iter().zip(&rows) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_updates_converge_monotonically() {
        let mut bank = MemoryBank::from_rows(array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], 0.5, 0.5, 1).unwrap();
        let target = array![[0.6, 0.8]];
        let angle = |b: &MemoryBank| b.bank.row(0).dot(&target.row(0)).clamp(-1.0, 1.0).acos();
        let mut prev = angle(&bank);
        for _ in 0..40 {
            bank_update(&mut bank, &target, &[0], 0.5).unwrap();
            let a = angle(&bank);
            assert!(a <= prev);
            prev = a;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn rows_stay_unit_norm() {
        let mut rng = rng::stream(7, Stream::Init, 0);
        let mut bank = MemoryBank::init(20, 5, 0.5, 0.5, 4, 1).unwrap();
        for step in 0..50 {
            let feats = Array2::from_shape_simple_fn((3, 5), || rng.sample::<f64, _>(StandardNormal) * 10.0);
            let ids = [step % 20, (step * 7) % 20, (step * 3 + 1) % 20];
            bank_update(&mut bank, &feats, &ids, 0.3).unwrap();
        }
        for r in bank.bank.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
