//! Learning per-sample inclusion weights by differentiating through training.
//!
//! The inner loop runs plain SGD on the model parameters over the
//! weighted noisy-set loss. The outer loop moves the weights against the
//! gradient of the summed clean-set losses of every inner iterate, then
//! clips them back into `[0, 1]`.
//!
//! Hypergradients are obtained by a reverse sweep over stored parameter
//! checkpoints. Each backward step re-records one inner update on a fresh
//! tape and differentiates `<adjoint, update>`, which yields the
//! Hessian-vector product and the weight gradient together. Truncation
//! splits the inner run into windows whose starting parameters are treated
//! as constants, so only one window of checkpoints is ever held.

mod hypergrad;
mod optim;
mod run;

pub use hypergrad::{hypergradient, hypergradient_full, hypergradient_truncated, Hypergradient};
pub use optim::{Optimizer, OptimizerKind, Plateau, PlateauConfig};
pub use run::{run_cdgd, CdgdAbort, CdgdRun};

use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datalab::Dataset;
use crate::diffcore::{Tape, Var};
use crate::error::{contract_err, Result};
use crate::modelzoo::{weighted_loss, Model};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchSize {
    #[default]
    Full,
    Size(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPolicy {
    /// New initial parameters for every outer iteration.
    #[default]
    FreshPerOuter,
    /// The same initial parameters every time.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InnerConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: BatchSize,
    pub shuffle: bool,
    pub seed_policy: SeedPolicy,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self { lr: 1.4, steps: 600, batch_size: BatchSize::Full, shuffle: false, seed_policy: SeedPolicy::FreshPerOuter }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.steps == 0 {
            return Err(contract_err!("inner lr must be > 0 and steps >= 1: {self:?}"));
        }
        if self.batch_size == BatchSize::Size(0) {
            return Err(contract_err!("batch size must be >= 1"));
        }
        Ok(())
    }

    /// Inner steps making up one pass over `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        match self.batch_size {
            BatchSize::Full => 1,
            BatchSize::Size(b) => n.div_ceil(b.min(n).max(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuterConfig {
    pub lr: f64,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub scheduler: Option<PlateauConfig>,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self { lr: 0.2, steps: 250, optimizer: OptimizerKind::default(), scheduler: Some(PlateauConfig::default()) }
    }
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 freezes the weights, which is occasionally useful
        if !(self.lr >= 0.0) {
            return Err(contract_err!("outer lr must be >= 0"));
        }
        if let Some(p) = self.scheduler {
            if !(p.factor > 0.0 && p.factor < 1.0) {
                return Err(contract_err!("plateau factor {} outside (0, 1)", p.factor));
            }
        }
        Ok(())
    }
}

/// How much of the weight dependence the reverse sweep keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Backpropagate through every inner step.
    #[default]
    Full,
    /// Cut the dependence every `window` steps; `None` means one epoch.
    Truncated { window: Option<usize> },
}

impl Mode {
    /// Window length in inner steps for a run of `steps` over `n` samples.
    pub fn window(&self, inner: &InnerConfig, n: usize) -> usize {
        match *self {
            Mode::Full => inner.steps,
            Mode::Truncated { window: Some(w) } => w,
            Mode::Truncated { window: None } => inner.steps_per_epoch(n),
        }
    }
}

/// Clamps every weight into `[0, 1]`.
pub fn clip_alpha(alpha: &mut [f64]) {
    for a in alpha {
        *a = a.clamp(0.0, 1.0);
    }
}

/// One minibatch of the noisy set: its rows and the matching weight slots.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Arc<[usize]>,
    pub x: Tensor,
    pub labels: Vec<usize>,
    /// All rows in their natural order, so the weight vector needs no gather.
    pub identity: bool,
}

impl Batch {
    pub fn new(ds: &Dataset, indices: Vec<usize>) -> Self {
        let identity = indices.len() == ds.len() && indices.iter().enumerate().all(|(i, &j)| i == j);
        let x = ds.samples.gather_rows(&indices);
        let labels = indices.iter().map(|&i| ds.labels[i]).collect();
        Self { indices: indices.into(), x, labels, identity }
    }

    pub fn full(ds: &Dataset) -> Self {
        Self::new(ds, (0..ds.len()).collect())
    }

    /// This batch's slice of the weight vector.
    pub fn weight_values(&self, alpha: &[f64]) -> Vec<f64> {
        if self.identity {
            alpha.to_vec()
        } else {
            self.indices.iter().map(|&i| alpha[i]).collect()
        }
    }

    fn weights(&self, tape: &mut Tape, alpha: Var) -> Result<Var> {
        if self.identity {
            Ok(alpha)
        } else {
            tape.gather_rows(alpha, &self.indices)
        }
    }
}

/// Batches for every inner step of one outer iteration.
///
/// With shuffling on, epoch `e` uses a permutation seeded by
/// `hash(seed, e)`; otherwise samples are taken in order.
pub fn batch_schedule(ds: &Dataset, inner: &InnerConfig, seed: u64) -> Vec<Arc<Batch>> {
    let n = ds.len();
    let b = match inner.batch_size {
        BatchSize::Full => n,
        BatchSize::Size(b) => b.min(n).max(1),
    };
    let per_epoch = inner.steps_per_epoch(n);
    let mut out = Vec::with_capacity(inner.steps);
    let mut epoch_batches: Vec<Arc<Batch>> = Vec::new();
    for step in 0..inner.steps {
        let pos = step % per_epoch;
        if pos == 0 && (epoch_batches.is_empty() || inner.shuffle) {
            let mut order: Vec<usize> = (0..n).collect();
            if inner.shuffle {
                let epoch = (step / per_epoch) as u64;
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(seed, epoch)));
            }
            epoch_batches = order.chunks(b).map(|c| Arc::new(Batch::new(ds, c.to_vec()))).collect();
        }
        out.push(epoch_batches[pos].clone());
    }
    out
}

/// Records `theta' = theta - lr * grad_theta L_w(theta; batch)` on `tape`.
///
/// The result stays a function of both `theta` and `alpha`, so the update can
/// be differentiated with respect to either.
pub fn inner_step_on_tape<M: Model + ?Sized>(
    model: &M,
    tape: &mut Tape,
    theta: Var,
    alpha: Var,
    batch: &Batch,
    lr: f64,
) -> Result<Var> {
    let w = batch.weights(tape, alpha)?;
    let loss = weighted_loss(model, tape, theta, &batch.x, &batch.labels, w)?;
    let g = tape.grad(loss, &[theta])?[0];
    let step = tape.scale(g, -lr)?;
    tape.add(theta, step)
}

/// One numeric SGD step on the weighted batch loss.
pub fn inner_step<M: Model + ?Sized>(model: &M, theta: &[f64], alpha: &[f64], batch: &Batch, lr: f64) -> Result<Vec<f64>> {
    let (_, g) = model.loss_grad(theta, &batch.x, &batch.labels, &batch.weight_values(alpha))?;
    Ok(theta.iter().zip(&g).map(|(t, g)| t - lr * g).collect())
}
