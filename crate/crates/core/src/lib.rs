//! Continual release of bounded real-valued streams under differential privacy.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only the algorithmic
//! pieces; file formats, the experiment harness and the command line live in
//! the companion `tops` crate.
//!
//! Central model (ToPS):
//!
//! 1. [`threshold`] picks a truncation threshold from a holdout prefix with the
//!    exponential mechanism, trading truncation bias against hierarchy noise.
//! 2. [`perturber`] adds Laplace noise through a fan-out `b` hierarchy over
//!    chunks of `r` readings. Noise is generated ahead of time and made
//!    consistent, so publishing only the finest level is enough.
//! 3. [`smoother`] optionally replaces the bottom `s` levels with predictions.
//!
//! Local model (ToPL): [`ldp`] estimates the value density with Square Wave
//! reports, picks the threshold from that estimate and perturbs each truncated
//! reading with the Hybrid mechanism.
//!
//! [`pipeline`] wires the pieces together and [`workload`] holds the
//! range-query evaluation primitives shared by tests and the harness.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

mod error;
mod math;

pub mod ldp;
pub mod mechanisms;
pub mod perturber;
pub mod pipeline;
pub mod rng;
pub mod smoother;
pub mod threshold;
pub mod workload;

pub use error::{Error, Result};
pub use rng::RandomSource;
