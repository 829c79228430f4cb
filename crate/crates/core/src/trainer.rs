//! Optimization loop, learning-rate schedule, checkpoints and evaluation.
//!
//! Each step draws a batch of pairs, builds one single-precision graph per
//! pair, and averages their parameter gradients before an Adam update.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorlab::CvdKind;
use crate::cudnet::{predict, ModelConfig, ModelError, ModelWeights, ParamTensor};
use crate::datagen::SamplePair;
use crate::losses::{objective, LossConfig, LossReport, PreparedPair};
use crate::metrics::{cud_gap, EvalRow, MetricError, SsimChannel};
use crate::tensorcore::Graph;

pub const CHECKPOINT_MAGIC: &str = "cudkit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "CUDKIT_THREADS";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no training pairs")]
    EmptyDataset,
    #[error("non-finite {term} at step {step}")]
    NonFinite { step: u64, term: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Log { path: PathBuf, source: csv::Error },
    #[error("pair {index}: {detail}")]
    Pair { index: usize, detail: String },
    #[error("adam: {0}")]
    Shape(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Share of the first epoch spent ramping the learning rate up.
    pub warmup_fraction: f64,
    pub kind: CvdKind,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub log_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch_size: 2,
            epochs: 20,
            warmup_fraction: 0.05,
            kind: CvdKind::Deuteranopia,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            log_path: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup fraction must be in [0,1), got {}",
                self.warmup_fraction
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas must be in [0,1), got ({b1}, {b2})"));
        }
        Ok(())
    }
}

/// Adam first and second moments, one array per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &[ParamTensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update; increments `state.step` first.
pub fn adam_step(
    params: &mut [ParamTensor],
    grads: &[Vec<f32>],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(TrainError::Shape(format!(
                "{} has {} values, gradient {}",
                p.name,
                p.len(),
                g.len()
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (k, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.data.len() {
            let gi = f64::from(grads[k][i]);
            let mi = b1 * f64::from(m[i]) + (1.0 - b1) * gi;
            let vi = b2 * f64::from(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            p.data[i] = (f64::from(p.data[i]) - update) as f32;
        }
    }
    Ok(())
}

/// Linear ramp over the warmup share of the first epoch, then a cosine
/// from `lr` to 0 across every epoch, restarting at each epoch boundary.
pub fn warmup_cosine_lr(step: u64, steps_per_epoch: u64, lr: f64, warmup_fraction: f64) -> f64 {
    let spe = steps_per_epoch.max(1);
    let warmup = ((warmup_fraction * spe as f64).round() as u64).min(spe - 1);
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    let (epoch, pos) = (step / spe, step % spe);
    let p = if epoch == 0 {
        (pos - warmup) as f64 / (spe - warmup) as f64
    } else {
        pos as f64 / spe as f64
    };
    lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Worker pool honoring `CUDKIT_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool, TrainError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| TrainError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| TrainError::Config(e.to_string()))
}

/// Loss report and per-parameter gradients of one pair, in single precision.
pub fn pair_gradients(
    weights: &ModelWeights,
    pair: &PreparedPair,
    loss: &LossConfig,
    with_grad: bool,
) -> Result<(LossReport, Vec<Vec<f32>>), ModelError> {
    let mut g = Graph::<f32>::new();
    let params = weights.bind(&mut g)?;
    let vars = objective(&mut g, &params, &weights.sketches, pair, loss)?;
    let report = vars.report(&g);
    if !with_grad || report.non_finite().is_some() {
        return Ok((report, Vec::new()));
    }
    g.backward(vars.total)?;
    let grads = params
        .all()
        .iter()
        .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.numel(v)], <[f32]>::to_vec))
        .collect();
    Ok((report, grads))
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mut out = LossReport::default();
    for r in reports {
        out.lab_l1 += r.lab_l1 / n;
        out.ms_ssim_term += r.ms_ssim_term / n;
        out.hist += r.hist / n;
        out.identity += r.identity / n;
        out.total += r.total / n;
    }
    out
}

/// Mean loss over `pairs` without updating anything.
pub fn mean_loss(weights: &ModelWeights, pairs: &[PreparedPair], loss: &LossConfig) -> Result<LossReport, TrainError> {
    let pool = thread_pool()?;
    let reports = pool.install(|| {
        pairs
            .par_iter()
            .map(|p| pair_gradients(weights, p, loss, false).map(|r| r.0))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(mean_report(&reports))
}

pub fn prepare_pairs(pairs: &[SamplePair], kind: CvdKind) -> Result<Vec<PreparedPair>, TrainError> {
    pairs
        .iter()
        .enumerate()
        .map(|(index, p)| {
            PreparedPair::new(&p.input, &p.target, kind).map_err(|e| TrainError::Pair {
                index,
                detail: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub adam: AdamState,
    pub config: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean loss over the training set before the first step.
    pub initial: LossReport,
    /// Mean loss over the training set after the last step.
    pub final_loss: LossReport,
    /// Batch-mean report of every step.
    pub steps: Vec<(u64, f64, LossReport)>,
}

#[derive(Serialize)]
struct LogRow {
    step: u64,
    lr: f64,
    lab_l1: f64,
    ms_ssim_term: f64,
    hist: f64,
    identity: f64,
    total: f64,
}

/// Trains from freshly initialized weights.
pub fn train(cfg: &TrainConfig, pairs: &[SamplePair]) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let weights = ModelWeights::init(cfg.model.clone(), cfg.seed)?;
    train_from(cfg, pairs, weights)
}

/// Trains starting from the given weights.
pub fn train_from(
    cfg: &TrainConfig,
    pairs: &[SamplePair],
    mut weights: ModelWeights,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let prepared = prepare_pairs(pairs, cfg.kind)?;
    let pool = thread_pool()?;
    let mut adam = AdamState::new(&weights.params);
    let mut log = match &cfg.log_path {
        Some(path) => Some(csv::Writer::from_path(path).map_err(|source| TrainError::Log {
            path: path.clone(),
            source,
        })?),
        None => None,
    };
    let log_err = |source: csv::Error| TrainError::Log {
        path: cfg.log_path.clone().unwrap_or_default(),
        source,
    };

    let initial = mean_loss(&weights, &prepared, &cfg.loss)?;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let steps_per_epoch = prepared.len().div_ceil(cfg.batch_size) as u64;
    let mut steps = Vec::new();
    let mut step = 0u64;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let lr = warmup_cosine_lr(step, steps_per_epoch, cfg.lr, cfg.warmup_fraction);
            let results = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| pair_gradients(&weights, &prepared[i], &cfg.loss, true))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            let reports: Vec<LossReport> = results.iter().map(|r| r.0).collect();
            let report = mean_report(&reports);
            if let Some(term) = reports.iter().find_map(LossReport::non_finite) {
                return Err(TrainError::NonFinite { step, term });
            }
            let scale = 1.0 / results.len() as f32;
            let mut grads: Vec<Vec<f32>> = weights.params.iter().map(|p| vec![0.0; p.len()]).collect();
            for (_, g) in &results {
                for (acc, gk) in grads.iter_mut().zip(g) {
                    for (a, &b) in acc.iter_mut().zip(gk) {
                        *a += b * scale;
                    }
                }
            }
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { step, term: "gradient" });
            }
            adam_step(&mut weights.params, &grads, &mut adam, lr, cfg.betas, cfg.adam_eps)?;
            if let Some(w) = log.as_mut() {
                let [lab_l1, ms_ssim_term, hist, identity, total] = report.values();
                w.serialize(LogRow {
                    step,
                    lr,
                    lab_l1,
                    ms_ssim_term,
                    hist,
                    identity,
                    total,
                })
                .map_err(log_err)?;
            }
            steps.push((step, lr, report));
            step += 1;
        }
        if let Some(w) = log.as_mut() {
            w.flush().map_err(|e| log_err(e.into()))?;
        }
        if let Some(path) = &cfg.checkpoint_path {
            save_checkpoint(
                &Checkpoint {
                    weights: weights.clone(),
                    adam: adam.clone(),
                    config: cfg.clone(),
                },
                path,
            )?;
        }
    }
    let final_loss = mean_loss(&weights, &prepared, &cfg.loss)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            weights,
            adam,
            config: cfg.clone(),
        },
        initial,
        final_loss,
        steps,
    })
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: truncated: expected {expected} payload bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: unsupported checkpoint version {found} (this build reads {CHECKPOINT_VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: corrupt checkpoint: {detail}")]
    Corrupt { path: PathBuf, detail: String },
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: u64,
    arrays: Vec<ArrayEntry>,
}

/// Layout: one UTF-8 line `cudkit-checkpoint <version> <json header>`,
/// then every array as little-endian f32 in header order: the weights,
/// then the Adam first moments, then the second moments.
pub fn checkpoint_bytes(c: &Checkpoint) -> Vec<u8> {
    let p = &c.weights.params;
    let mut arrays: Vec<ArrayEntry> = Vec::with_capacity(3 * p.len());
    for prefix in ["", "adam_m.", "adam_v."] {
        arrays.extend(p.iter().map(|t| ArrayEntry {
            name: format!("{prefix}{}", t.name),
            shape: t.shape.clone(),
        }));
    }
    let mut config = c.config.clone();
    config.model = c.weights.config.clone();
    let header = Header {
        config,
        step: c.adam.step,
        arrays,
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {json}\n").into_bytes();
    let data = p.iter().map(|t| &t.data).chain(&c.adam.m).chain(&c.adam.v);
    for arr in data {
        for v in arr {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint, CheckpointError> {
    let corrupt = |detail: String| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("no header line".into()))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt("header is not UTF-8".into()))?;
    let mut parts = line.splitn(3, ' ');
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(corrupt("missing checkpoint magic".into()));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("unreadable version field".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let header: Header =
        serde_json::from_str(parts.next().unwrap_or("")).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &bytes[nl + 1..];
    let total: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    if payload.len() < 4 * total {
        return Err(CheckpointError::Truncated {
            path: path.to_path_buf(),
            expected: 4 * total,
            found: payload.len(),
        });
    }
    if payload.len() > 4 * total {
        return Err(corrupt(format!("{} trailing bytes", payload.len() - 4 * total)));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut arrays: Vec<Vec<f32>> = header
        .arrays
        .iter()
        .map(|a| floats.by_ref().take(a.shape.iter().product()).collect())
        .collect();
    if !arrays.len().is_multiple_of(3) {
        return Err(corrupt(format!(
            "{} arrays is not weights plus two moment sets",
            arrays.len()
        )));
    }
    let n = arrays.len() / 3;
    let v = arrays.split_off(2 * n);
    let m = arrays.split_off(n);
    let params = header.arrays[..n]
        .iter()
        .zip(arrays)
        .map(|(a, data)| ParamTensor {
            name: a.name.clone(),
            shape: a.shape.clone(),
            data,
        })
        .collect();
    let weights = ModelWeights::from_params(header.config.model.clone(), params).map_err(|e| corrupt(e.to_string()))?;
    Ok(Checkpoint {
        weights,
        adam: AdamState {
            step: header.step,
            m,
            v,
        },
        config: header.config,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&checkpoint_bytes(c)).map_err(io)?;
    f.sync_all().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_checkpoint(&bytes, path)
}

/// Metrics and simulated-lightness gaps of the model on evaluation pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub row: EvalRow,
    pub gap_input: f64,
    pub gap_pred: f64,
    pub gap_target: f64,
}

pub fn evaluate_pairs(
    weights: &ModelWeights,
    pairs: &[SamplePair],
    kind: CvdKind,
    channel: SsimChannel,
) -> Result<Vec<EvalSample>, TrainError> {
    let pool = thread_pool()?;
    pool.install(|| {
        pairs
            .par_iter()
            .map(|p| {
                let (pred, _) = predict(&p.input, weights, kind)?;
                let [a, b] = &p.regions;
                Ok(EvalSample {
                    row: EvalRow::compute(&p.input, &pred, &p.target, channel)?,
                    gap_input: cud_gap(&p.input, a, b, kind)?,
                    gap_pred: cud_gap(&pred, a, b, kind)?,
                    gap_target: cud_gap(&p.target, a, b, kind)?,
                })
            })
            .collect()
    })
}
