//! Turning learned weights or trained classifiers into corruption verdicts,
//! and scoring verdicts against the truth.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilevel::{Optimizer, OptimizerKind, Plateau, PlateauConfig};
use crate::datalab::Dataset;
use crate::error::{contract_err, Result};
use crate::modelzoo::Model;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Method {
    CdgdAlpha { tau: f64 },
    CdgdT,
    SnBaseline,
    ScBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: Method,
    pub predicted_mask: Vec<bool>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub metadata: BTreeMap<String, String>,
}

impl DetectionReport {
    /// Scores `predicted_mask` against `truth`.
    pub fn new(method: Method, predicted_mask: Vec<bool>, truth: &[bool]) -> Result<Self> {
        let s = score(&predicted_mask, truth)?;
        Ok(Self { method, predicted_mask, precision: s.precision, recall: s.recall, f1: s.f1, metadata: BTreeMap::new() })
    }

    pub fn scores(&self) -> Scores {
        Scores { precision: self.precision, recall: self.recall, f1: self.f1 }
    }
}

/// Flags every sample whose weight is strictly below `tau`.
pub fn cdgd_alpha(alpha: &[f64], tau: f64) -> Vec<bool> {
    alpha.iter().map(|&a| a < tau).collect()
}

/// Precision, recall and harmonic-mean F1 of `predicted` against `truth`.
///
/// Empty denominators count as 0.
pub fn score(predicted: &[bool], truth: &[bool]) -> Result<Scores> {
    if predicted.len() != truth.len() {
        return Err(contract_err!("mask lengths {} and {}", predicted.len(), truth.len()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(Scores { precision, recall, f1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub points: Vec<SweepPoint>,
    /// Threshold of the first point with the highest F1.
    pub best_tau: f64,
}

/// Scores the weight threshold at every `tau` of a sorted grid in `[0, 1]`.
pub fn threshold_sweep(alpha: &[f64], truth: &[bool], grid: &[f64]) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(contract_err!("empty threshold grid"));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(contract_err!("threshold grid must be sorted within [0, 1]"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &tau in grid {
        let s = score(&cdgd_alpha(alpha, tau), truth)?;
        points.push(SweepPoint { tau, precision: s.precision, recall: s.recall, f1: s.f1 });
    }
    let best = points.iter().fold(points[0], |b, p| if p.f1 > b.f1 { *p } else { b });
    Ok(Sweep { points, best_tau: best.tau })
}

/// `n + 1` evenly spaced thresholds from 0 to 1.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Plain supervised training used by the classifier-based detectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub scheduler: Option<PlateauConfig>,
    /// Share of the clean set held out for stopping when training on it.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.01,
            optimizer: OptimizerKind::default(),
            scheduler: Some(PlateauConfig::default()),
            holdout_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) {
            return Err(contract_err!("training needs epochs >= 1 and lr > 0: {self:?}"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(contract_err!("holdout fraction {} outside (0, 1)", self.holdout_fraction));
        }
        Ok(())
    }
}

/// Parameters of a finished training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub theta: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Full-batch training on the weighted loss of `train`, keeping the
/// parameters of the epoch with the lowest mean loss on `val`.
pub fn train_weighted<M: Model + ?Sized>(
    model: &M,
    train: &Dataset,
    weights: &[f64],
    val: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Trained> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(contract_err!("empty validation set"));
    }
    let mut theta = model.init_params(seed);
    let mut opt = Optimizer::new(cfg.optimizer, theta.len());
    let mut sched = cfg.scheduler.map(|s| Plateau::new(s, cfg.lr));
    let mut best = Trained { theta: theta.clone(), best_epoch: 0, best_val_loss: f64::INFINITY };
    for epoch in 1..=cfg.epochs {
        let (_, g) = model.loss_grad(&theta, &train.samples, &train.labels, weights)?;
        let lr = sched.as_ref().map_or(cfg.lr, Plateau::lr);
        opt.step(&mut theta, &g, lr);
        let v = model.mean_loss(&theta, &val.samples, &val.labels)?;
        if v < best.best_val_loss {
            best = Trained { theta: theta.clone(), best_epoch: epoch, best_val_loss: v };
        }
        if let Some(s) = sched.as_mut() {
            s.observe(v);
        }
    }
    Ok(best)
}

fn misclassified<M: Model + ?Sized>(model: &M, theta: &[f64], ds: &Dataset) -> Result<Vec<bool>> {
    let pred = model.predict(theta, &ds.samples)?;
    Ok(pred.iter().zip(&ds.labels).map(|(p, y)| p != y).collect())
}

/// Trains on the noisy set weighted by `alpha` and flags what the result
/// misclassifies.
pub fn cdgd_t<M: Model + ?Sized>(
    noisy: &Dataset,
    alpha: &[f64],
    clean: &Dataset,
    model: &M,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<bool>> {
    let t = train_weighted(model, noisy, alpha, clean, cfg, seed)?;
    misclassified(model, &t.theta, noisy)
}

/// Trains on the whole noisy set, stopping on the clean set.
pub fn sn_baseline<M: Model + ?Sized>(
    noisy: &Dataset,
    clean: &Dataset,
    model: &M,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<bool>> {
    cdgd_t(noisy, &vec![1.0; noisy.len()], clean, model, cfg, seed)
}

/// Trains on the clean set alone, stopping on a seeded holdout of it.
pub fn sc_baseline<M: Model + ?Sized>(
    clean: &Dataset,
    noisy: &Dataset,
    model: &M,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<bool>> {
    cfg.validate()?;
    let n = clean.len();
    if n < 2 {
        return Err(contract_err!("clean set of {n} cannot be split for stopping"));
    }
    let held = ((cfg.holdout_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 1));
    let mut val_idx = index::sample(&mut rng, n, held).into_vec();
    val_idx.sort_unstable();
    let mut is_val = vec![false; n];
    for &i in &val_idx {
        is_val[i] = true;
    }
    let train_idx: Vec<usize> = (0..n).filter(|&i| !is_val[i]).collect();
    let train = clean.subset(&train_idx, "clean-train");
    let val = clean.subset(&val_idx, "clean-holdout");
    let t = train_weighted(model, &train, &vec![1.0; train.len()], &val, cfg, seed)?;
    misclassified(model, &t.theta, noisy)
}
