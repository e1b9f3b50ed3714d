//! Core algorithms for the EchoLSTM sequence-modeling toolkit: dense
//! matrix kernel, deterministic RNG, tape-based reverse-mode autodiff,
//! the recurrent cells and their ablation variants, synthetic benchmark
//! generators, the trainer, and gate/gradient/attention diagnostics.
//!
//! The crate is `no_std` (alloc only); all IO, file formats, and the CLI
//! live in the companion `echo-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod cells;
pub mod diag;
pub mod error;
pub mod grad;
pub mod matrix;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::Rng;
