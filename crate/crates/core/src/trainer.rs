//! The training loop: per-batch forward and backward passes, optimizer and
//! memory-bank updates, learning-rate schedule, evaluation and checkpoints.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{batch_iterator, AugmentConfig, Batch, Dataset};
use crate::ensemble::{consensus_loss, init_ensemble, transformed_assignments, EnsembleKind, TransformEnsemble};
use crate::error::{Error, Result};
use crate::instdisc::{bank_update, draw_noise, nce_loss_with_noise, MemoryBank};
use crate::metrics::{argmax_assignment, kmeans, pairwise_nmi_diversity, MetricReport, Partition};
use crate::nn::{normalize_rows, normalize_rows_backward, sgd_step, Mlp, ParamBlocks, SgdConfig};
use crate::rng::{self, Stream};
use crate::softclust::{assignment_probabilities, init_prototypes, sinkhorn_codes, AssignmentMatrix, Prototypes, SinkhornIters};

/// Every hyperparameter of a run. Missing fields in a config file take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Number of prototypes. `0` means "take it from the dataset labels".
    pub k: usize,
    pub tau_cluster: f64,
    pub tau_id: f64,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub ensemble_size: usize,
    pub ensemble_kind: EnsembleKind,
    pub proj_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub feat_dim: usize,
    pub head_hidden: usize,
    pub embed_dim: usize,
    pub bank_momentum: f64,
    /// Noise samples per datapoint. `0` means `min(4096, N − 1)`.
    pub m_noise: usize,
    pub noise_sigma: f64,
    pub dropout_p: f64,
    pub scale_jitter: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (and after the last). `0` disables.
    pub eval_every: usize,
    pub kmeans_n_init: usize,
    pub kmeans_max_iter: usize,
    /// L2-normalize extracted features before k-means.
    pub normalize_features: bool,
    /// Record pairwise-NMI diversity of the ensemble over each epoch's
    /// training pass.
    pub track_diversity: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 0.03,
            lr_decay_epochs: vec![60, 120, 160],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            alpha: 1.0,
            beta: 1.0,
            k: 0,
            tau_cluster: 0.1,
            tau_id: 0.5,
            epsilon: 0.05,
            sinkhorn_iters: 3,
            ensemble_size: 4,
            ensemble_kind: EnsembleKind::GaussianProjection,
            proj_dim: 32,
            encoder_hidden: vec![64],
            feat_dim: 128,
            head_hidden: 256,
            embed_dim: 64,
            bank_momentum: 0.5,
            m_noise: 0,
            noise_sigma: aug.noise_sigma,
            dropout_p: aug.dropout_p,
            scale_jitter: aug.scale_jitter,
            seed: 0,
            eval_every: 10,
            kmeans_n_init: 20,
            kmeans_max_iter: 300,
            normalize_features: true,
            track_diversity: true,
        }
    }
}

impl TrainConfig {
    /// The long schedule: 2000 epochs with decays at 600, 950, 1300, 1650 and 2000.
    pub fn long_schedule(mut self) -> Self {
        self.epochs = 2000;
        self.lr_decay_epochs = vec![600, 950, 1300, 1650, 2000];
        self
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            noise_sigma: self.noise_sigma,
            dropout_p: self.dropout_p,
            scale_jitter: self.scale_jitter,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// All constraint violations, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };
        let pos = |v: f64| v > 0.0 && v.is_finite();
        check(self.batch_size >= 2, format!("batch_size must be >= 2 (got {})", self.batch_size));
        check(self.lr >= 0.0 && self.lr.is_finite(), format!("lr must be >= 0 (got {})", self.lr));
        check(
            self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]),
            format!("lr_decay_epochs must be strictly increasing (got {:?})", self.lr_decay_epochs),
        );
        check(
            self.lr_decay_factor >= 0.0 && self.lr_decay_factor.is_finite(),
            format!("lr_decay_factor must be >= 0 (got {})", self.lr_decay_factor),
        );
        check((0.0..1.0).contains(&self.momentum), format!("momentum must be in [0, 1) (got {})", self.momentum));
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            format!("weight_decay must be >= 0 (got {})", self.weight_decay),
        );
        check(self.alpha >= 0.0 && self.alpha.is_finite(), format!("alpha must be >= 0 (got {})", self.alpha));
        check(self.beta >= 0.0 && self.beta.is_finite(), format!("beta must be >= 0 (got {})", self.beta));
        check(self.k != 1, "k must be >= 2 (or 0 to use the label count)".to_string());
        check(pos(self.tau_cluster), format!("tau_cluster must be > 0 (got {})", self.tau_cluster));
        check(pos(self.tau_id), format!("tau_id must be > 0 (got {})", self.tau_id));
        check(pos(self.epsilon), format!("epsilon must be > 0 (got {})", self.epsilon));
        check(self.sinkhorn_iters >= 1, "sinkhorn_iters must be >= 1".to_string());
        check(self.proj_dim >= 1, "proj_dim must be >= 1".to_string());
        check(self.encoder_hidden.iter().all(|&h| h >= 1), "encoder_hidden widths must be >= 1".to_string());
        check(self.feat_dim >= 1, "feat_dim must be >= 1".to_string());
        check(self.head_hidden >= 1, "head_hidden must be >= 1".to_string());
        check(self.embed_dim >= 1, "embed_dim must be >= 1".to_string());
        check(
            (0.0..=1.0).contains(&self.bank_momentum),
            format!("bank_momentum must be in [0, 1] (got {})", self.bank_momentum),
        );
        let aug = self.augment().validate().err();
        check(aug.is_none(), aug.map(|e| e.to_string()).unwrap_or_default());
        check(self.kmeans_n_init >= 1, "kmeans_n_init must be >= 1".to_string());
        check(self.kmeans_max_iter >= 1, "kmeans_max_iter must be >= 1".to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    /// Resolves `k = 0` and `m_noise = 0` against a dataset.
    pub fn resolved_for(&self, ds: &Dataset) -> Result<TrainConfig> {
        let mut cfg = self.clone();
        if cfg.k == 0 {
            cfg.k = ds
                .num_classes()
                .ok_or_else(|| Error::invalid("k not set and dataset has no labels"))?;
        }
        if cfg.m_noise == 0 {
            cfg.m_noise = 4096.min(ds.len().saturating_sub(1));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `α·L_Z + β·L_b`.
pub fn total_loss(alpha: f64, beta: f64, l_z: f64, l_b: f64) -> f64 {
    alpha * l_z + beta * l_b
}

/// The trainable parameters. Also used as the gradient and velocity buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Mlp,
    pub head: Mlp,
    pub prototypes: Prototypes,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            head: self.head.zeros_like(),
            prototypes: Prototypes {
                c: Array2::zeros(self.prototypes.c.raw_dim()),
            },
        }
    }
}

impl ParamBlocks for ModelParams {
    fn block_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.encoder.block_names().into_iter().map(|n| format!("encoder.{n}")).collect();
        names.extend(self.head.block_names().into_iter().map(|n| format!("head.{n}")));
        names.push("prototypes".to_string());
        names
    }

    fn blocks(&self) -> Vec<&[f64]> {
        let mut b = self.encoder.blocks();
        b.extend(self.head.blocks());
        b.push(self.prototypes.c.as_slice().expect("standard layout"));
        b
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b = self.encoder.blocks_mut();
        b.extend(self.head.blocks_mut());
        b.push(self.prototypes.c.as_slice_mut().expect("standard layout"));
        b
    }
}

/// Everything the algorithm mutates, plus the resolved config it runs under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: TrainConfig,
    pub config_hash: String,
    pub params: ModelParams,
    pub velocity: ModelParams,
    pub bank: MemoryBank,
    pub ensemble: TransformEnsemble,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
}

impl ModelState {
    /// Fresh state for `ds`. Each component draws from its own stream, so
    /// e.g. changing the ensemble size leaves the network initialization alone.
    pub fn init(cfg: &TrainConfig, ds: &Dataset) -> Result<Self> {
        let cfg = cfg.resolved_for(ds)?;
        let mut enc_dims = vec![ds.dim()];
        enc_dims.extend(&cfg.encoder_hidden);
        enc_dims.push(cfg.feat_dim);
        let encoder = Mlp::init(&enc_dims, &mut rng::stream(cfg.seed, Stream::Init, 0))?;
        let head = Mlp::init(
            &[cfg.feat_dim, cfg.head_hidden, cfg.embed_dim],
            &mut rng::stream(cfg.seed, Stream::Init, 1),
        )?;
        let prototypes = init_prototypes(cfg.k, cfg.embed_dim, cfg.seed)?;
        let ensemble = init_ensemble(cfg.ensemble_size, cfg.ensemble_kind, cfg.embed_dim, cfg.proj_dim, cfg.seed)?;
        let bank = MemoryBank::init(ds.len(), cfg.feat_dim, cfg.bank_momentum, cfg.tau_id, cfg.m_noise, cfg.seed)?;
        let params = ModelParams {
            encoder,
            head,
            prototypes,
        };
        Ok(Self::from_parts(cfg, params, bank, ensemble))
    }

    /// Assembles a state with zero velocity at epoch 0.
    pub fn from_parts(config: TrainConfig, params: ModelParams, bank: MemoryBank, ensemble: TransformEnsemble) -> Self {
        let velocity = params.zeros_like();
        Self {
            config_hash: config.hash(),
            config,
            params,
            velocity,
            bank,
            ensemble,
            epoch: 0,
            global_step: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.config.hash() != self.config_hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        self.params.encoder.validate()?;
        self.params.head.validate()?;
        if self.params.encoder.output_dim() != self.params.head.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "encoder output vs head input",
                expected: self.params.encoder.output_dim(),
                found: self.params.head.input_dim(),
            });
        }
        if self.params.head.output_dim() != self.params.prototypes.dim() {
            return Err(Error::DimensionMismatch {
                context: "head output vs prototypes",
                expected: self.params.head.output_dim(),
                found: self.params.prototypes.dim(),
            });
        }
        if self.bank.dim() != self.params.encoder.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "memory bank width",
                expected: self.params.encoder.output_dim(),
                found: self.bank.dim(),
            });
        }
        if self.velocity.blocks().iter().map(|b| b.len()).ne(self.params.blocks().iter().map(|b| b.len())) {
            return Err(Error::Checkpoint("velocity shape differs from parameters".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let state: ModelState = serde_json::from_reader(file)?;
        state.validate()?;
        Ok(state)
    }
}

/// Per-step loss values. `l_z` is reported even when `alpha = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_b: f64,
    pub l_z: f64,
    pub l_total: f64,
}

/// Losses, gradients and intermediates of one batch, without any update.
#[derive(Debug, Clone)]
pub struct StepEval {
    pub losses: StepLosses,
    pub grads: ModelParams,
    /// Normalized view-1 features, the memory-bank update input.
    pub feats1: Array2<f64>,
    pub p1: AssignmentMatrix,
    pub p2: AssignmentMatrix,
    /// Per-sample codes `(q¹, q²)`, each `B × K`.
    pub codes: (Array2<f64>, Array2<f64>),
    /// Argmax of `p̃` for view 1 under each transform.
    pub transformed_argmax: Vec<Vec<usize>>,
}

/// Forward and backward pass for one batch.
///
/// `noise` holds the NCE noise ids per sample. If `codes` is given it
/// replaces the Sinkhorn targets, which is how finite-difference checks hold
/// them fixed.
pub fn evaluate_step(
    params: &ModelParams,
    bank: &MemoryBank,
    ensemble: &TransformEnsemble,
    cfg: &TrainConfig,
    batch: &Batch,
    noise: &[Vec<usize>],
    codes: Option<&(Array2<f64>, Array2<f64>)>,
) -> Result<StepEval> {
    let (f1, enc_cache1) = params.encoder.forward(&batch.view1)?;
    let (f2, enc_cache2) = params.encoder.forward(&batch.view2)?;
    let (z1, head_cache1) = params.head.forward(&f1)?;
    let (z2, head_cache2) = params.head.forward(&f2)?;

    let (feats1, norms1) = normalize_rows(&f1, "view-1 features")?;
    let nce = nce_loss_with_noise(bank, &feats1, &batch.indices, noise)?;
    let l_b = nce.loss;
    if !l_b.is_finite() {
        return Err(Error::NonFinite(format!("L_b = {l_b}")));
    }

    let protos = &params.prototypes;
    let p1 = assignment_probabilities(&z1, protos, cfg.tau_cluster)?;
    let p2 = assignment_probabilities(&z2, protos, cfg.tau_cluster)?;
    let codes = match codes {
        Some(c) => c.clone(),
        None => {
            let iters = SinkhornIters::Fixed(cfg.sinkhorn_iters);
            let q1 = sinkhorn_codes(&z1, protos, cfg.epsilon, iters)?.q_rows;
            let q2 = sinkhorn_codes(&z2, protos, cfg.epsilon, iters)?.q_rows;
            (q1, q2)
        }
    };

    let consensus = if ensemble.is_empty() {
        None
    } else {
        Some(consensus_loss(ensemble, &z1, &z2, protos, &codes.0, &codes.1, cfg.tau_cluster)?)
    };
    let l_z = consensus.as_ref().map_or(0.0, |c| c.loss);
    let transformed_argmax = consensus.as_ref().map_or_else(Vec::new, |c| c.view1_argmax.clone());
    if !l_z.is_finite() {
        return Err(Error::NonFinite(format!("L_Z = {l_z}")));
    }
    let l_total = total_loss(cfg.alpha, cfg.beta, l_z, l_b);
    if !l_total.is_finite() {
        return Err(Error::NonFinite(format!("L_total = {l_total}")));
    }

    let mut grads = params.zeros_like();
    let mut g_f1 = if cfg.beta != 0.0 {
        let g_bar = &nce.grad_feats * cfg.beta;
        normalize_rows_backward(&feats1, &norms1, &g_bar)
    } else {
        Array2::zeros(f1.raw_dim())
    };
    let mut g_f2 = None;
    if let Some(c) = consensus.filter(|_| cfg.alpha != 0.0) {
        let g_z1 = &c.grad_z1 * cfg.alpha;
        let g_z2 = &c.grad_z2 * cfg.alpha;
        grads.prototypes.c = &c.grad_c * cfg.alpha;
        g_f1 += &params.head.backward(&head_cache1, &g_z1, &mut grads.head)?;
        g_f2 = Some(params.head.backward(&head_cache2, &g_z2, &mut grads.head)?);
    }
    params.encoder.backward(&enc_cache1, &g_f1, &mut grads.encoder)?;
    if let Some(g) = g_f2 {
        params.encoder.backward(&enc_cache2, &g, &mut grads.encoder)?;
    }

    Ok(StepEval {
        losses: StepLosses { l_b, l_z, l_total },
        grads,
        feats1,
        p1,
        p2,
        codes,
        transformed_argmax,
    })
}

/// NCE noise ids for the next step of `state`.
pub fn step_noise(state: &ModelState, ids: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut rng = rng::stream(state.config.seed, Stream::Noise, state.global_step);
    draw_noise(ids, state.bank.m_noise, state.bank.len(), &mut rng)
}

/// One optimizer step followed by the memory-bank update.
pub fn train_step(state: &mut ModelState, batch: &Batch, lr: f64) -> Result<StepLosses> {
    Ok(step_with_eval(state, batch, lr)?.losses)
}

fn step_with_eval(state: &mut ModelState, batch: &Batch, lr: f64) -> Result<StepEval> {
    if batch.len() < 2 || batch.view1.dim() != batch.view2.dim() || batch.view1.nrows() != batch.len() {
        return Err(Error::invalid("malformed batch"));
    }
    let noise = step_noise(state, &batch.indices)?;
    let eval = evaluate_step(
        &state.params,
        &state.bank,
        &state.ensemble,
        &state.config,
        batch,
        &noise,
        None,
    )?;
    sgd_step(&mut state.params, &eval.grads, &mut state.velocity, lr, &state.config.sgd())?;
    bank_update(&mut state.bank, &eval.feats1, &batch.indices, state.config.bank_momentum)?;
    state.global_step += 1;
    Ok(eval)
}

/// Clustering quality of an evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub l_b: f64,
    pub l_z: f64,
    pub l_total: f64,
    pub wall_time_seconds: f64,
    pub eval: Option<EvalMetrics>,
    /// Agreement of the per-transform argmax assignments over the images
    /// seen during the epoch.
    pub pairwise_nmi_mean: Option<f64>,
    pub pairwise_nmi_std: Option<f64>,
}

/// Encoder outputs for every row, in id order, without augmentation.
pub fn extract_features(state: &ModelState, ds: &Dataset) -> Result<Array2<f64>> {
    state.params.encoder.predict(ds.features())
}

/// Features as fed to k-means: normalized when the config asks for it.
pub fn clustering_features(state: &ModelState, ds: &Dataset) -> Result<Array2<f64>> {
    let f = extract_features(state, ds)?;
    if state.config.normalize_features {
        Ok(normalize_rows(&f, "extracted features")?.0)
    } else {
        Ok(f)
    }
}

/// k-means partition of the extracted features into `k` clusters.
pub fn cluster_dataset(state: &ModelState, ds: &Dataset, k: usize) -> Result<Partition> {
    let feats = clustering_features(state, ds)?;
    let cfg = &state.config;
    let seed = rng::derive_seed(cfg.seed, Stream::KMeans, u64::MAX);
    Ok(kmeans(&feats, k, cfg.kmeans_n_init, cfg.kmeans_max_iter, seed)?.partition)
}

/// Full metric report against the dataset labels, with k from the labels.
pub fn evaluate(state: &ModelState, ds: &Dataset) -> Result<MetricReport> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::invalid("dataset has no labels to evaluate against"))?;
    let k = ds.num_classes().unwrap_or(0);
    let pred = cluster_dataset(state, ds, k)?;
    MetricReport::evaluate(&Partition::from_labels(labels.to_vec()), &pred)
}

/// Argmax partitions of the transformed assignments over the whole dataset,
/// one per transform.
pub fn ensemble_partitions(state: &ModelState, ds: &Dataset) -> Result<Vec<Partition>> {
    let z = state.params.head.predict(&extract_features(state, ds)?)?;
    let assignments = transformed_assignments(&state.ensemble, &z, &state.params.prototypes, state.config.tau_cluster)?;
    Ok(assignments.iter().map(|a| argmax_assignment(&a.p)).collect())
}

/// Pairwise-NMI mean and std of the ensemble partitions.
pub fn ensemble_diversity(state: &ModelState, ds: &Dataset) -> Result<(f64, f64)> {
    pairwise_nmi_diversity(&ensemble_partitions(state, ds)?)
}

/// Runs one epoch and returns its stats.
pub fn run_epoch(state: &mut ModelState, ds: &Dataset) -> Result<EpochStats> {
    let start = Instant::now();
    let cfg = state.config.clone();
    let epoch = state.epoch;
    let lr = cfg.lr_at(epoch);
    let batch_seed = rng::derive_seed(cfg.seed, Stream::Shuffle, epoch as u64);
    let mut sums = [0.0; 3];
    let mut steps = 0;
    let mut seen: Vec<Vec<usize>> = vec![Vec::new(); state.ensemble.len()];
    for batch in batch_iterator(ds, cfg.batch_size, &cfg.augment(), batch_seed)? {
        let eval = step_with_eval(state, &batch, lr)?;
        for (acc, a) in seen.iter_mut().zip(&eval.transformed_argmax) {
            acc.extend(a);
        }
        let l = eval.losses;
        sums[0] += l.l_b;
        sums[1] += l.l_z;
        sums[2] += l.l_total;
        steps += 1;
    }
    state.epoch += 1;
    let mean = |s: f64| if steps == 0 { 0.0 } else { s / steps as f64 };
    let wall_time_seconds = start.elapsed().as_secs_f64();

    let last = state.epoch == cfg.epochs;
    let eval = if ds.labels().is_some() && cfg.eval_every > 0 && (state.epoch.is_multiple_of(cfg.eval_every) || last) {
        let r = evaluate(state, ds)?;
        Some(EvalMetrics {
            acc: r.acc,
            nmi: r.nmi,
            ari: r.ari,
        })
    } else {
        None
    };
    let (pairwise_nmi_mean, pairwise_nmi_std) = if cfg.track_diversity && seen.len() >= 2 && steps > 0 {
        let parts: Vec<Partition> = seen.into_iter().map(Partition::from_labels).collect();
        let (m, s) = pairwise_nmi_diversity(&parts)?;
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    Ok(EpochStats {
        epoch: state.epoch,
        lr,
        steps,
        l_b: mean(sums[0]),
        l_z: mean(sums[1]),
        l_total: mean(sums[2]),
        wall_time_seconds,
        eval,
        pairwise_nmi_mean,
        pairwise_nmi_std,
    })
}

/// Continues training until `state.config.epochs`, calling `on_epoch` after
/// each epoch.
pub fn resume(
    state: &mut ModelState,
    ds: &Dataset,
    mut on_epoch: impl FnMut(&ModelState, &EpochStats) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    if state.bank.len() != ds.len() {
        return Err(Error::DimensionMismatch {
            context: "memory bank rows vs dataset",
            expected: ds.len(),
            found: state.bank.len(),
        });
    }
    let mut all = Vec::new();
    while state.epoch < state.config.epochs {
        let stats = run_epoch(state, ds)?;
        log::info!(
            "epoch {} lr {:.4} L_b {:.4} L_Z {:.4} L_total {:.4}",
            stats.epoch,
            stats.lr,
            stats.l_b,
            stats.l_z,
            stats.l_total
        );
        on_epoch(state, &stats)?;
        all.push(stats);
    }
    Ok(all)
}

/// Initializes and trains with an epoch callback.
pub fn fit_with(
    cfg: &TrainConfig,
    ds: &Dataset,
    on_epoch: impl FnMut(&ModelState, &EpochStats) -> Result<()>,
) -> Result<(ModelState, Vec<EpochStats>)> {
    if ds.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut state = ModelState::init(cfg, ds)?;
    let stats = resume(&mut state, ds, on_epoch)?;
    Ok((state, stats))
}

pub fn fit(cfg: &TrainConfig, ds: &Dataset) -> Result<(ModelState, Vec<EpochStats>)> {
    fit_with(cfg, ds, |_, _| Ok(()))
}
