//! Corruption detection by gradient descent on per-sample inclusion weights.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, the
//! experiment harness and the CLI live in the `cdgd` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bilevel;
pub mod datalab;
pub mod detect;
pub mod diffcore;
pub mod error;
pub mod modelzoo;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
