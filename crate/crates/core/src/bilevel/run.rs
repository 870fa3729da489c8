use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::hypergrad::hypergradient_with_schedule;
use super::{batch_schedule, clip_alpha, InnerConfig, Mode, Optimizer, OuterConfig, Plateau, SeedPolicy};
use crate::datalab::Dataset;
use crate::error::{contract_err, Error, Result};
use crate::modelzoo::Model;
use crate::seeds::SeedStream;

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

/// A finished outer optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdgdRun {
    pub alpha: Vec<f64>,
    /// Summed clean-set loss of each outer iteration.
    pub history: Vec<f64>,
    /// Outer learning rate used at each outer iteration.
    pub lr_history: Vec<f64>,
    pub peak_segments: usize,
}

/// An outer optimization that stopped on an error, with what it had so far.
#[derive(Debug, Clone, PartialEq)]
pub struct CdgdAbort {
    pub error: Error,
    pub outer_step: usize,
    pub partial: CdgdRun,
}

impl core::fmt::Display for CdgdAbort {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "outer step {}: {}", self.outer_step, self.error)
    }
}

impl From<CdgdAbort> for Error {
    fn from(a: CdgdAbort) -> Self {
        a.error
    }
}

/// Optimizes the inclusion weights of `noisy` against the clean-set loss.
///
/// Weights start at 1. Each outer iteration draws fresh initial parameters
/// from `hash(seed, outer index)` (unless the inner config pins them), takes
/// the hypergradient, applies one optimizer step and clips to `[0, 1]`.
pub fn run_cdgd<M: Model + ?Sized>(
    noisy: &Dataset,
    clean: &Dataset,
    model: &M,
    inner: &InnerConfig,
    outer: &OuterConfig,
    mode: Mode,
    seed: u64,
) -> core::result::Result<CdgdRun, CdgdAbort> {
    let mut run = CdgdRun { alpha: vec![1.0; noisy.len()], history: Vec::new(), lr_history: Vec::new(), peak_segments: 0 };
    let abort = |error: Error, outer_step: usize, partial: &CdgdRun| CdgdAbort { error, outer_step, partial: partial.clone() };

    let checked: Result<usize> = (|| {
        inner.validate()?;
        outer.validate()?;
        if noisy.is_empty() || clean.is_empty() {
            return Err(contract_err!("noisy and clean sets must be nonempty"));
        }
        let window = mode.window(inner, noisy.len());
        if window == 0 || window > inner.steps {
            return Err(contract_err!("window {window} outside [1, {}]", inner.steps));
        }
        Ok(window)
    })();
    let window = checked.map_err(|e| abort(e, 0, &run))?;

    let seeds = SeedStream::new(seed);
    let init_seeds = seeds.child(INIT_STREAM);
    let shuffle_seeds = seeds.child(SHUFFLE_STREAM);
    let mut opt = Optimizer::new(outer.optimizer, noisy.len());
    let mut sched = outer.scheduler.map(|cfg| Plateau::new(cfg, outer.lr));

    for k in 0..outer.steps {
        let init_index = match inner.seed_policy {
            SeedPolicy::FreshPerOuter => k as u64,
            SeedPolicy::Fixed => 0,
        };
        let theta0 = model.init_params(init_seeds.derive(init_index));
        let schedule = batch_schedule(noisy, inner, shuffle_seeds.derive(k as u64));
        let hg = hypergradient_with_schedule(model, &theta0, &run.alpha, &schedule, clean, inner.lr, window)
            .map_err(|e| abort(e, k, &run))?;
        let lr = sched.as_ref().map_or(outer.lr, Plateau::lr);
        opt.step(&mut run.alpha, &hg.delta_alpha, lr);
        clip_alpha(&mut run.alpha);
        if let Some(s) = sched.as_mut() {
            s.observe(hg.loss_sum);
        }
        run.history.push(hg.loss_sum);
        run.lr_history.push(lr);
        run.peak_segments = run.peak_segments.max(hg.peak_segments);
    }
    Ok(run)
}
