//! coeffdyn: sequence-model mixing coefficients as impulse responses.
//!
//! The library treats the output of a causal sequence layer as a linear
//! combination of past value vectors and computes the combination weights by
//! evolving each key through a per-step linear operator. Eight published
//! layer designs are provided as presets over one engine, together with
//! native single-purpose implementations of each that serve as independent
//! cross-checks.
//!
//! Modules:
//! - [`dynamics`]: the engine (projections, impulse states, coefficient
//!   matrices, dense and recurrent forward routes).
//! - [`architectures`]: named presets and their native recurrences.
//! - [`analysis`]: geometry and stability diagnostics.
//! - [`tasks`]: deterministic synthetic-task generators.
//! - [`train`]: a small trainable model with reverse-mode gradients.
//! - [`verify`]: the runnable check registry behind `coeffdyn verify`.

pub mod analysis;
pub mod architectures;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod tasks;
pub mod train;
pub mod util;
pub mod verify;

pub use error::{Error, Result};
