//! Closed-form kernels for a binary classifier with one ReLU hidden layer.
//!
//! They compute exactly what the tape computes for that architecture, but
//! take one sample at a time so every working vector is a contiguous row of
//! hidden-layer width and the whole state stays in cache.

use alloc::vec;
use alloc::vec::Vec;

use crate::diffcore::{bce_with_logits, sigmoid};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Parameter blocks of `x W1 + b1 -> relu -> . w2 + b2`.
pub(crate) struct OneHidden<'a> {
    d: usize,
    h: usize,
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: f64,
}

impl<'a> OneHidden<'a> {
    pub(crate) fn new(d: usize, h: usize, theta: &'a [f64]) -> Self {
        let (w1, rest) = theta.split_at(d * h);
        let (b1, rest) = rest.split_at(h);
        let (w2, rest) = rest.split_at(h);
        Self { d, h, w1, b1, w2, b2: rest[0] }
    }

    /// Hidden pre-activations of one sample.
    fn pre(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.b1);
        for (i, &xi) in x.iter().enumerate() {
            axpy(out, xi, &self.w1[i * self.h..(i + 1) * self.h]);
        }
    }
}

/// Gradient-shaped accumulator with the same block layout.
struct Blocks {
    d: usize,
    h: usize,
    flat: Vec<f64>,
}

impl Blocks {
    fn new(d: usize, h: usize) -> Self {
        Self { d, h, flat: vec![0.0; d * h + 2 * h + 1] }
    }

    /// Adds the contribution of one sample whose pre-activation adjoint is
    /// `gz`, hidden output adjoint coefficient `c` and activations `a`.
    fn add(&mut self, x: &[f64], gz: &[f64], c: f64, a: &[f64]) {
        let (d, h) = (self.d, self.h);
        for (i, &xi) in x.iter().enumerate() {
            axpy(&mut self.flat[i * h..(i + 1) * h], xi, gz);
        }
        axpy(&mut self.flat[d * h..d * h + h], 1.0, gz);
        axpy(&mut self.flat[d * h + h..d * h + 2 * h], c, a);
        self.flat[d * h + 2 * h] += c;
    }
}

#[inline(always)]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline(always)]
fn gate(z: f64, v: f64) -> f64 {
    if z > 0.0 {
        v
    } else {
        0.0
    }
}

fn relu_into(z: &[f64], out: &mut [f64]) {
    for (o, &z) in out.iter_mut().zip(z) {
        *o = gate(z, z);
    }
}

fn finite(v: &[f64], op: &'static str) -> Result<()> {
    if v.iter().fold(0.0, |acc, x| acc + x * 0.0) == 0.0 {
        Ok(())
    } else {
        Err(Error::Numerical { op })
    }
}

pub(crate) fn mean_loss(net: &OneHidden, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut z = vec![0.0; net.h];
    let mut a = vec![0.0; net.h];
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        net.pre(x.row(r), &mut z);
        relu_into(&z, &mut a);
        total += bce_with_logits(net.b2 + dot(&a, net.w2), y as f64);
    }
    let loss = total / x.rows() as f64;
    finite(&[loss], "bce_with_logits")?;
    Ok(loss)
}

/// `(1/N) sum_n w_n l_n` and its gradient.
pub(crate) fn loss_grad(net: &OneHidden, x: &Tensor, labels: &[usize], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (d, h) = (net.d, net.h);
    let inv = 1.0 / x.rows() as f64;
    let mut z = vec![0.0; h];
    let mut a = vec![0.0; h];
    let mut gz = vec![0.0; h];
    let mut g = Blocks::new(d, h);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let (xr, y) = (x.row(r), y as f64);
        net.pre(xr, &mut z);
        relu_into(&z, &mut a);
        let o = net.b2 + dot(&a, net.w2);
        loss += weights[r] * bce_with_logits(o, y);
        let c = weights[r] * inv * (sigmoid(o) - y);
        for ((g, &z), &w) in gz.iter_mut().zip(&z).zip(net.w2) {
            *g = gate(z, c * w);
        }
        g.add(xr, &gz, c, &a);
    }
    let loss = loss * inv;
    finite(&[loss], "bce_with_logits")?;
    finite(&g.flat, "matmul")?;
    Ok((loss, g.flat))
}

/// Pullback of `theta' = theta - lr grad L_w(theta)` for the adjoint `lambda`.
///
/// Returns `lambda - lr H lambda` and the weight adjoints
/// `-(lr / N) <lambda, grad l_n>`.
pub(crate) fn step_pullback(
    net: &OneHidden,
    x: &Tensor,
    labels: &[usize],
    weights: &[f64],
    lr: f64,
    lambda: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d, h) = (net.d, net.h);
    let n = x.rows();
    let inv = 1.0 / n as f64;
    let dir = OneHidden::new(d, h, lambda);
    let mut z = vec![0.0; h];
    let mut zd = vec![0.0; h];
    let mut a = vec![0.0; h];
    let mut gz = vec![0.0; h];
    let mut hv = Blocks::new(d, h);
    let mut d_weights = vec![0.0; n];
    for (r, &y) in labels.iter().enumerate() {
        let (xr, y) = (x.row(r), y as f64);
        net.pre(xr, &mut z);
        dir.pre(xr, &mut zd);
        relu_into(&z, &mut a);
        for (zd, &z) in zd.iter_mut().zip(&z) {
            *zd = gate(z, *zd);
        }
        // logit and its directional derivative along lambda
        let o = net.b2 + dot(&a, net.w2);
        let od = dir.b2 + dot(&zd, net.w2) + dot(&a, dir.w2);
        let p = sigmoid(o);
        let c = weights[r] * inv * (p - y);
        let cd = weights[r] * inv * p * (1.0 - p) * od;
        d_weights[r] = -lr * inv * (p - y) * od;
        for (((g, &z), &w), &wd) in gz.iter_mut().zip(&z).zip(net.w2).zip(dir.w2) {
            *g = gate(z, cd * w + c * wd);
        }
        hv.add(xr, &gz, cd, &a);
        axpy(&mut hv.flat[d * h + h..d * h + 2 * h], c, &zd);
    }
    let d_theta: Vec<f64> = lambda.iter().zip(&hv.flat).map(|(l, v)| l - lr * v).collect();
    finite(&d_theta, "matmul")?;
    finite(&d_weights, "dot")?;
    Ok((d_theta, d_weights))
}

#[cfg(test)]
mod tests {
    use alloc::vec::Vec;

    use proptest::prelude::*;

    use crate::modelzoo::{MlpSpec, Model, TapeOnly};
    use crate::tensor::Tensor;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    fn instance() -> impl Strategy<Value = (MlpSpec, Vec<f64>, Tensor, Vec<usize>, Vec<f64>, Vec<f64>)> {
        (1usize..4, 1usize..7, 1usize..9, any::<u64>()).prop_flat_map(|(d, h, n, seed)| {
            let spec = MlpSpec::binary(d, alloc::vec![h]);
            let p = spec.num_params();
            (
                Just(spec),
                Just(seed),
                prop::collection::vec(-2.0..2.0f64, n * d),
                prop::collection::vec(0usize..2, n),
                prop::collection::vec(0.0..=1.0f64, n),
                prop::collection::vec(-1.0..1.0f64, p),
            )
                .prop_map(move |(spec, seed, x, y, w, lam)| {
                    let theta = MlpSpec::init_params(&spec, seed).flat.iter().map(|t| t * 3.0).collect();
                    (spec, theta, Tensor::new(n, d, x), y, w, lam)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_tape((spec, theta, x, y, w, lam) in instance()) {
            let tape = TapeOnly(spec.clone());
            let (l, g) = spec.loss_grad(&theta, &x, &y, &w).unwrap();
            let (lt, gt) = tape.loss_grad(&theta, &x, &y, &w).unwrap();
            prop_assert!(close(&[l], &[lt], 1e-12));
            prop_assert!(close(&g, &gt, 1e-12));
            let m = spec.mean_loss(&theta, &x, &y).unwrap();
            let mt = tape.mean_loss(&theta, &x, &y).unwrap();
            prop_assert!(close(&[m], &[mt], 1e-12));
            let (dt, dw) = spec.step_pullback(&theta, &x, &y, &w, 0.7, &lam).unwrap();
            let (dtt, dwt) = tape.step_pullback(&theta, &x, &y, &w, 0.7, &lam).unwrap();
            prop_assert!(close(&dt, &dtt, 1e-12));
            prop_assert!(close(&dw, &dwt, 1e-12));
        }
    }

    #[test]
    fn rejects_what_the_tape_rejects() {
        let spec = MlpSpec::binary(2, alloc::vec![3]);
        let theta = MlpSpec::init_params(&spec, 1).flat;
        let x = Tensor::new(2, 2, alloc::vec![0.1, 0.2, 0.3, 0.4]);
        assert!(spec.loss_grad(&theta, &x, &[0, 1], &[1.0, 1.5]).is_err());
        assert!(spec.loss_grad(&theta, &x, &[0, 2], &[1.0, 1.0]).is_err());
        assert!(spec.loss_grad(&theta, &x, &[0], &[1.0]).is_err());
        assert!(spec.loss_grad(&theta[1..], &x, &[0, 1], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let spec = MlpSpec::binary(1, alloc::vec![1]);
        let theta = alloc::vec![f64::MAX, 0.0, f64::MAX, 0.0];
        let x = Tensor::new(1, 1, alloc::vec![10.0]);
        assert!(matches!(spec.loss_grad(&theta, &x, &[0], &[1.0]), Err(crate::Error::Numerical { .. })));
    }
}
