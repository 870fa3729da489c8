use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::{batch_schedule, inner_step, Batch, InnerConfig};
use crate::datalab::Dataset;
use crate::error::{contract_err, Error, Result};
use crate::modelzoo::Model;

/// Result of one unrolled inner run.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergradient {
    /// Gradient of the summed clean-set losses with respect to the weights.
    pub delta_alpha: Vec<f64>,
    /// `sum_i L(theta^i; clean)` over inner iterates `1..=steps`.
    pub loss_sum: f64,
    /// Clean-set loss of each inner iterate.
    pub clean_losses: Vec<f64>,
    pub final_theta: Vec<f64>,
    /// Largest number of parameter checkpoints held at once.
    pub peak_segments: usize,
}

fn clean_loss_and_grad<M: Model + ?Sized>(model: &M, theta: &[f64], clean: &Dataset) -> Result<(f64, Vec<f64>)> {
    if clean.is_empty() {
        return Err(contract_err!("empty clean set"));
    }
    model.loss_grad(theta, &clean.samples, &clean.labels, &vec![1.0; clean.len()])
}

/// Pulls the adjoint `lambda` of `theta' = step(theta, alpha)` back to
/// `theta`, optionally adding the clean-set gradient at `theta`, and adds
/// the weight part into `delta`.
fn pullback<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    alpha: &[f64],
    batch: &Batch,
    lr: f64,
    lambda: &[f64],
    clean: Option<&Dataset>,
    delta: &mut [f64],
) -> Result<Vec<f64>> {
    let (mut d_theta, d_w) = model.step_pullback(theta, &batch.x, &batch.labels, &batch.weight_values(alpha), lr, lambda)?;
    if let Some(c) = clean {
        let (_, g) = clean_loss_and_grad(model, theta, c)?;
        for (d, g) in d_theta.iter_mut().zip(&g) {
            *d += g;
        }
    }
    for (&i, g) in batch.indices.iter().zip(&d_w) {
        delta[i] += g;
    }
    Ok(d_theta)
}

fn at_step(step: usize, last_loss: f64) -> impl FnOnce(Error) -> Error {
    move |cause| Error::InnerStep { step, last_loss, cause: Box::new(cause) }
}

/// Hypergradient with the weight dependence cut every `window` inner steps.
///
/// Within a window starting at `theta^s`, the start is a constant and the
/// window contributes `grad_alpha sum_{i in window} L(theta^i; clean)`.
/// `window == steps` is exact backpropagation through the whole run.
pub fn hypergradient<M: Model + ?Sized>(
    model: &M,
    theta0: &[f64],
    alpha: &[f64],
    noisy: &Dataset,
    clean: &Dataset,
    inner: &InnerConfig,
    window: usize,
    schedule_seed: u64,
) -> Result<Hypergradient> {
    inner.validate()?;
    if alpha.len() != noisy.len() {
        return Err(contract_err!("{} weights for {} noisy samples", alpha.len(), noisy.len()));
    }
    if window == 0 || window > inner.steps {
        return Err(contract_err!("window {window} outside [1, {}]", inner.steps));
    }
    if theta0.len() != model.num_params() {
        return Err(contract_err!("{} initial parameters, model has {}", theta0.len(), model.num_params()));
    }
    let schedule = batch_schedule(noisy, inner, schedule_seed);
    hypergradient_with_schedule(model, theta0, alpha, &schedule, clean, inner.lr, window)
}

pub(crate) fn hypergradient_with_schedule<M: Model + ?Sized>(
    model: &M,
    theta0: &[f64],
    alpha: &[f64],
    schedule: &[Arc<Batch>],
    clean: &Dataset,
    lr: f64,
    window: usize,
) -> Result<Hypergradient> {
    let steps = schedule.len();
    let mut delta = vec![0.0; alpha.len()];
    let mut clean_losses = Vec::with_capacity(steps);
    let mut peak = 0;
    let mut theta = theta0.to_vec();
    let mut last_loss = f64::NAN;

    let mut start = 0;
    while start < steps {
        let end = (start + window).min(steps);
        // checkpoints[j] = theta^{start + j}, the input of step start + j + 1
        let mut checkpoints: Vec<Vec<f64>> = Vec::with_capacity(end - start);
        for i in start + 1..=end {
            let next = inner_step(model, &theta, alpha, &schedule[i - 1], lr).map_err(at_step(i, last_loss))?;
            checkpoints.push(core::mem::replace(&mut theta, next));
            peak = peak.max(checkpoints.len());
            if i < end {
                last_loss = model.mean_loss(&theta, &clean.samples, &clean.labels).map_err(at_step(i, last_loss))?;
                clean_losses.push(last_loss);
            }
        }
        let (l_end, mut lambda) = clean_loss_and_grad(model, &theta, clean).map_err(at_step(end, last_loss))?;
        last_loss = l_end;
        clean_losses.push(l_end);

        for i in (start + 1..=end).rev() {
            let prev = checkpoints.pop().expect("one checkpoint per step");
            // theta^start is a constant of this window: its own clean loss
            // carries no weight dependence
            let with_clean = (i - 1 > start).then_some(clean);
            lambda = pullback(model, &prev, alpha, &schedule[i - 1], lr, &lambda, with_clean, &mut delta)
                .map_err(at_step(i, last_loss))?;
        }
        start = end;
    }

    Ok(Hypergradient {
        delta_alpha: delta,
        loss_sum: clean_losses.iter().sum(),
        clean_losses,
        final_theta: theta,
        peak_segments: peak,
    })
}

/// Exact hypergradient through all `inner.steps` updates.
pub fn hypergradient_full<M: Model + ?Sized>(
    model: &M,
    theta0: &[f64],
    alpha: &[f64],
    noisy: &Dataset,
    clean: &Dataset,
    inner: &InnerConfig,
    schedule_seed: u64,
) -> Result<Hypergradient> {
    hypergradient(model, theta0, alpha, noisy, clean, inner, inner.steps, schedule_seed)
}

/// Hypergradient keeping at most `window` steps of weight dependence.
pub fn hypergradient_truncated<M: Model + ?Sized>(
    model: &M,
    theta0: &[f64],
    alpha: &[f64],
    noisy: &Dataset,
    clean: &Dataset,
    inner: &InnerConfig,
    window: usize,
    schedule_seed: u64,
) -> Result<Hypergradient> {
    hypergradient(model, theta0, alpha, noisy, clean, inner, window, schedule_seed)
}
