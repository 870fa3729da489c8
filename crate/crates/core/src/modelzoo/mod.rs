//! Model definitions and the per-sample losses used by every training loop.
//!
//! A model exposes its per-sample losses as tape variables over a flat
//! parameter column, so the same definitions serve plain training, the
//! unrolled inner loop, and second-order sweeps.

mod fused;

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{contract_err, spec_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHead {
    /// One logit, sigmoid + binary cross entropy; labels in {0, 1}.
    #[default]
    SigmoidBce,
    /// One logit per class, softmax + cross entropy.
    SoftmaxCe,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub output_head: OutputHead,
}

/// Where one dense layer lives inside the flat parameter vector.
///
/// The weight block is `rows x cols` (fan-in by fan-out) starting at
/// `offset`; the `cols` biases follow it directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl LayerLayout {
    pub fn bias_offset(&self) -> usize {
        self.offset + self.rows * self.cols
    }

    pub fn size(&self) -> usize {
        self.rows * self.cols + self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub flat: Vec<f64>,
    pub layout: Vec<LayerLayout>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::column(self.flat.clone())
    }
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, output_head: OutputHead) -> Self {
        Self { input_dim, hidden_dims, output_dim, activation: Activation::Relu, output_head }
    }

    /// Binary classifier with sigmoid + BCE head.
    pub fn binary(input_dim: usize, hidden_dims: Vec<usize>) -> Self {
        Self::new(input_dim, hidden_dims, 1, OutputHead::SigmoidBce)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(spec_err!("all layer widths must be at least 1: {self:?}"));
        }
        if self.output_head == OutputHead::SigmoidBce && self.output_dim != 1 {
            return Err(spec_err!("sigmoid-bce head needs output_dim 1, got {}", self.output_dim));
        }
        if self.output_head == OutputHead::SoftmaxCe && self.output_dim < 2 {
            return Err(spec_err!("softmax-ce head needs at least 2 outputs"));
        }
        Ok(())
    }

    fn widths(&self) -> impl Iterator<Item = usize> + '_ {
        core::iter::once(self.input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(core::iter::once(self.output_dim))
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let widths: Vec<usize> = self.widths().collect();
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let l = LayerLayout { rows: w[0], cols: w[1], offset };
                offset += l.size();
                l
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(LayerLayout::size).sum()
    }

    pub fn num_classes(&self) -> usize {
        match self.output_head {
            OutputHead::SigmoidBce => 2,
            OutputHead::SoftmaxCe => self.output_dim,
        }
    }

    /// Weights and biases uniform on `+-sqrt(1 / fan_in)`, layer by layer.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let layout = self.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = Vec::with_capacity(self.num_params());
        for l in &layout {
            let bound = libm::sqrt(1.0 / l.rows as f64);
            for _ in 0..l.size() {
                flat.push(rng.gen_range(-bound..=bound));
            }
        }
        ParamVector { flat, layout }
    }

    /// Logits `batch x output_dim` for the samples `x` (one per row).
    pub fn forward(&self, tape: &mut Tape, theta: Var, x: Var) -> Result<Var> {
        let n = self.num_params();
        if tape.shape(theta) != (n, 1) {
            return Err(spec_err!("parameters {:?}, spec needs ({n}, 1)", tape.shape(theta)));
        }
        if tape.shape(x).1 != self.input_dim {
            return Err(spec_err!("input width {} for spec input_dim {}", tape.shape(x).1, self.input_dim));
        }
        let layout = self.layout();
        let last = layout.len() - 1;
        let mut h = x;
        for (i, l) in layout.iter().enumerate() {
            let w = tape.slice(theta, l.offset, l.rows, l.cols)?;
            let b = tape.slice(theta, l.bias_offset(), 1, l.cols)?;
            h = tape.affine(h, w, b)?;
            if i != last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h)?,
                };
            }
        }
        Ok(h)
    }

    fn targets(&self, labels: &[usize]) -> Result<Tensor> {
        match self.output_head {
            OutputHead::SigmoidBce => {
                let data = labels
                    .iter()
                    .map(|&y| match y {
                        0 => Ok(0.0),
                        1 => Ok(1.0),
                        _ => Err(spec_err!("label {y} for a binary head")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::column(data))
            }
            OutputHead::SoftmaxCe => {
                let k = self.output_dim;
                let mut data = alloc::vec![0.0; labels.len() * k];
                for (r, &y) in labels.iter().enumerate() {
                    if y >= k {
                        return Err(spec_err!("label {y} for {k} classes"));
                    }
                    data[r * k + y] = 1.0;
                }
                Ok(Tensor::new(labels.len(), k, data))
            }
        }
    }

    /// Class predictions: `logit > 0` for the binary head, first argmax otherwise.
    pub fn predict(&self, theta: &[f64], x: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let th = tape.constant(Tensor::column(theta.to_vec()));
        let xv = tape.constant(x.clone());
        let logits = self.forward(&mut tape, th, xv)?;
        let z = tape.value(logits);
        Ok((0..z.rows())
            .map(|r| match self.output_head {
                OutputHead::SigmoidBce => usize::from(z.get(r, 0) > 0.0),
                OutputHead::SoftmaxCe => {
                    let row = z.row(r);
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    best
                }
            })
            .collect())
    }
}

/// Anything trainable by the loops in this crate.
pub trait Model {
    fn num_params(&self) -> usize;

    fn init_params(&self, seed: u64) -> Vec<f64>;

    /// Per-sample losses as an `n x 1` column.
    fn per_sample_losses(&self, tape: &mut Tape, theta: Var, x: &Tensor, labels: &[usize]) -> Result<Var>;

    fn predict(&self, theta: &[f64], x: &Tensor) -> Result<Vec<usize>>;

    /// `(1/N) sum_n w_n l_n` and its parameter gradient.
    fn loss_grad(&self, theta: &[f64], x: &Tensor, labels: &[usize], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
        tape_loss_grad(self, theta, x, labels, weights)
    }

    /// Unweighted mean loss at `theta`.
    fn mean_loss(&self, theta: &[f64], x: &Tensor, labels: &[usize]) -> Result<f64> {
        plain_loss_value(self, theta, x, labels)
    }

    /// Pulls the adjoint `lambda` of `theta - lr grad L_w(theta)` back to
    /// `theta` and to the per-row weights.
    fn step_pullback(
        &self,
        theta: &[f64],
        x: &Tensor,
        labels: &[usize],
        weights: &[f64],
        lr: f64,
        lambda: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        tape_step_pullback(self, theta, x, labels, weights, lr, lambda)
    }
}

/// Tape evaluation of [`Model::loss_grad`].
pub fn tape_loss_grad<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    x: &Tensor,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let th = tape.leaf(Tensor::column(theta.to_vec()));
    let w = tape.constant(Tensor::column(weights.to_vec()));
    let loss = weighted_loss(model, &mut tape, th, x, labels, w)?;
    let g = tape.grad(loss, &[th])?[0];
    Ok((tape.value(loss).item(), tape.value(g).data().to_vec()))
}

/// Tape evaluation of [`Model::step_pullback`].
///
/// Differentiates `-lr <lambda, grad_theta L_w(theta)>`; the identity part of
/// the update contributes `lambda` itself.
pub fn tape_step_pullback<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    x: &Tensor,
    labels: &[usize],
    weights: &[f64],
    lr: f64,
    lambda: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let th = tape.leaf(Tensor::column(theta.to_vec()));
    let w = tape.leaf(Tensor::column(weights.to_vec()));
    let loss = weighted_loss(model, &mut tape, th, x, labels, w)?;
    let g = tape.grad(loss, &[th])?[0];
    let lam = tape.constant(Tensor::column(lambda.to_vec()));
    let gl = tape.dot(g, lam)?;
    let obj = tape.scale(gl, -lr)?;
    let grads = tape.grad(obj, &[th, w])?;
    let mut d_theta = tape.value(grads[0]).data().to_vec();
    for (d, l) in d_theta.iter_mut().zip(lambda) {
        *d += l;
    }
    Ok((d_theta, tape.value(grads[1]).data().to_vec()))
}

/// Runs a model through the tape only, bypassing any closed-form kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeOnly<M>(pub M);

impl<M: Model> Model for TapeOnly<M> {
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        self.0.init_params(seed)
    }

    fn per_sample_losses(&self, tape: &mut Tape, theta: Var, x: &Tensor, labels: &[usize]) -> Result<Var> {
        self.0.per_sample_losses(tape, theta, x, labels)
    }

    fn predict(&self, theta: &[f64], x: &Tensor) -> Result<Vec<usize>> {
        self.0.predict(theta, x)
    }
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(contract_err!("{} weights for a batch of {n}", weights.len()));
    }
    if let Some(bad) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(contract_err!("inclusion weight {bad} outside [0, 1]"));
    }
    if n == 0 {
        return Err(contract_err!("empty batch"));
    }
    Ok(())
}

impl Model for MlpSpec {
    fn num_params(&self) -> usize {
        MlpSpec::num_params(self)
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        MlpSpec::init_params(self, seed).flat
    }

    fn per_sample_losses(&self, tape: &mut Tape, theta: Var, x: &Tensor, labels: &[usize]) -> Result<Var> {
        if x.rows() != labels.len() {
            return Err(spec_err!("{} samples but {} labels", x.rows(), labels.len()));
        }
        let xv = tape.constant(x.clone());
        let logits = self.forward(tape, theta, xv)?;
        let y = tape.constant(self.targets(labels)?);
        match self.output_head {
            OutputHead::SigmoidBce => tape.bce_with_logits(logits, y),
            OutputHead::SoftmaxCe => tape.softmax_cross_entropy(logits, y),
        }
    }

    fn predict(&self, theta: &[f64], x: &Tensor) -> Result<Vec<usize>> {
        MlpSpec::predict(self, theta, x)
    }

    fn loss_grad(&self, theta: &[f64], x: &Tensor, labels: &[usize], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.one_hidden(theta, x, labels)? {
            Some(net) => {
                check_weights(weights, x.rows())?;
                fused::loss_grad(&net, x, labels, weights)
            }
            None => tape_loss_grad(self, theta, x, labels, weights),
        }
    }

    fn mean_loss(&self, theta: &[f64], x: &Tensor, labels: &[usize]) -> Result<f64> {
        match self.one_hidden(theta, x, labels)? {
            Some(net) if x.rows() > 0 => fused::mean_loss(&net, x, labels),
            _ => plain_loss_value(self, theta, x, labels),
        }
    }

    fn step_pullback(
        &self,
        theta: &[f64],
        x: &Tensor,
        labels: &[usize],
        weights: &[f64],
        lr: f64,
        lambda: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        match self.one_hidden(theta, x, labels)? {
            Some(net) if lambda.len() == theta.len() => {
                check_weights(weights, x.rows())?;
                fused::step_pullback(&net, x, labels, weights, lr, lambda)
            }
            _ => tape_step_pullback(self, theta, x, labels, weights, lr, lambda),
        }
    }
}

impl MlpSpec {
    /// Closed-form view of `theta` when the spec is a binary classifier with
    /// one ReLU hidden layer and the batch is well formed.
    fn one_hidden<'a>(&self, theta: &'a [f64], x: &Tensor, labels: &[usize]) -> Result<Option<fused::OneHidden<'a>>> {
        let eligible = self.hidden_dims.len() == 1
            && self.output_head == OutputHead::SigmoidBce
            && self.activation == Activation::Relu
            && self.output_dim == 1;
        if !eligible || theta.len() != self.num_params() || x.cols() != self.input_dim {
            // the tape path reports the shape problem
            return Ok(None);
        }
        if x.rows() != labels.len() {
            return Err(spec_err!("{} samples but {} labels", x.rows(), labels.len()));
        }
        if let Some(y) = labels.iter().find(|&&y| y > 1) {
            return Err(spec_err!("label {y} for a binary head"));
        }
        Ok(Some(fused::OneHidden::new(self.input_dim, self.hidden_dims[0], theta)))
    }
}

/// One scalar parameter, `l(x; theta) = (theta - x)^2` on the first feature.
///
/// Small enough to differentiate by hand, which makes it the reference model
/// for checking hypergradients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuadraticModel {
    pub init: f64,
}

impl Model for QuadraticModel {
    fn num_params(&self) -> usize {
        1
    }

    fn init_params(&self, _seed: u64) -> Vec<f64> {
        alloc::vec![self.init]
    }

    fn per_sample_losses(&self, tape: &mut Tape, theta: Var, x: &Tensor, _labels: &[usize]) -> Result<Var> {
        if tape.shape(theta) != (1, 1) || x.cols() != 1 {
            return Err(spec_err!("quadratic model takes one parameter and one feature"));
        }
        let t = tape.fill(theta, x.rows(), 1)?;
        let xv = tape.constant(x.clone());
        let d = tape.sub(t, xv)?;
        tape.mul(d, d)
    }

    fn predict(&self, _theta: &[f64], _x: &Tensor) -> Result<Vec<usize>> {
        Err(spec_err!("quadratic model has no classifier head"))
    }
}

/// `(1/N) sum_n w_n l(x_n; theta)` with a fixed denominator `N = batch size`.
///
/// `weights` must be an `N x 1` variable with entries in `[0, 1]`; clipping
/// is the caller's job.
pub fn weighted_loss<M: Model + ?Sized>(
    model: &M,
    tape: &mut Tape,
    theta: Var,
    x: &Tensor,
    labels: &[usize],
    weights: Var,
) -> Result<Var> {
    let n = x.rows();
    if tape.shape(weights).1 != 1 {
        return Err(contract_err!("{:?} weights for a batch of {n}", tape.shape(weights)));
    }
    check_weights(tape.value(weights).data(), n)?;
    let losses = model.per_sample_losses(tape, theta, x, labels)?;
    let weighted = tape.mul(weights, losses)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Unweighted mean per-sample loss.
pub fn plain_loss<M: Model + ?Sized>(model: &M, tape: &mut Tape, theta: Var, x: &Tensor, labels: &[usize]) -> Result<Var> {
    if x.rows() == 0 {
        return Err(contract_err!("empty batch"));
    }
    let losses = model.per_sample_losses(tape, theta, x, labels)?;
    tape.mean(losses)
}

/// Numeric value of [`plain_loss`] at `theta`.
pub fn plain_loss_value<M: Model + ?Sized>(model: &M, theta: &[f64], x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let th = tape.constant(Tensor::column(theta.to_vec()));
    let l = plain_loss(model, &mut tape, th, x, labels)?;
    Ok(tape.value(l).item())
}
