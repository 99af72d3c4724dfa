//! Core library for poke-based object manipulation: a quasi-static 2-D
//! pushing simulator, a jointly trained forward/inverse dynamics model on
//! learned image features, a greedy closed-loop poke planner, a
//! geometry-blind blob baseline, and the evaluation metrics used to compare
//! them.
//!
//! Everything in this crate is `no_std` (alloc only) and deterministic:
//! given the same seeds the simulator, the training loop, and the planners
//! reproduce bit-identical results on any platform. Transcendental math
//! goes through [`fmath`] so no host libm leaks in.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod blob;
pub mod error;
pub mod fmath;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod planner;
pub mod rng;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
