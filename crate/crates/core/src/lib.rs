//! Training and analysis core for shallow CNNs with a topographic 11×11
//! hidden layer.
//!
//! Everything here is pure computation over in-memory buffers and builds
//! without `std`; file access, configuration and orchestration live in the
//! `topo-lab` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fourier;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod perturb;
pub mod retinotopy;
pub mod rng;
pub mod spatial;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
