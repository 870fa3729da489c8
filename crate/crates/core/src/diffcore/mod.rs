//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records a small fixed vocabulary of tensor operations. The
//! reverse sweep produced by [`Tape::grad`] is itself recorded as tape
//! operations, which is what makes second-order quantities available:
//! a Hessian-vector product is the gradient of `<grad f, v>`.
//!
//! ReLU uses the subgradient 0 at the kink, and the sign pattern seen in the
//! forward pass is reused by every later differentiation pass.

mod tape;

pub use tape::{Tape, Var};
pub(crate) use tape::{bce_with_logits, sigmoid};

use alloc::vec::Vec;

use crate::error::{spec_err, Result};
use crate::tensor::Tensor;

/// Gradient of a scalar function at `at`, one tensor per input.
///
/// ```
/// use cdgd_core::diffcore::grad;
/// use cdgd_core::tensor::Tensor;
///
/// let g = grad(|t, v| t.dot(v[0], v[0]), &[Tensor::column(vec![1.0, 2.0])]).unwrap();
/// assert_eq!(g[0].data(), &[2.0, 4.0]);
/// ```
pub fn grad<F>(f: F, at: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = at.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.grad(out, &vars)?;
    Ok(grads.into_iter().map(|g| tape.value(g).clone()).collect())
}

/// Hessian-vector product `H(at) v` of a scalar function, computed as the
/// gradient of `<grad f(at), v>` without forming `H`.
pub fn hvp<F>(f: F, at: &Tensor, v: &Tensor) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    if at.shape() != v.shape() {
        return Err(spec_err!("hvp: direction {:?} for point {:?}", v.shape(), at.shape()));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(at.clone());
    let out = f(&mut tape, x)?;
    let g = tape.grad(out, &[x])?[0];
    let dir = tape.constant(v.clone());
    let gv = tape.dot(g, dir)?;
    let hv = tape.grad(gv, &[x])?[0];
    Ok(tape.value(hv).clone())
}

/// Value and gradient in one call.
pub fn value_and_grad<F>(f: F, at: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = at.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    let grads = tape.grad(out, &vars)?;
    Ok((value, grads.into_iter().map(|g| tape.value(g).clone()).collect()))
}

#[cfg(test)]
mod tests;
