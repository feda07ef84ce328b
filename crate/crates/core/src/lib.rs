//! Rehearsal-free class-incremental learning over precomputed features.
//!
//! A growing multi-head classifier learns disjoint category sets one
//! sequence at a time. Before each new sequence the previous model's raw
//! logits on the new training data are stored as *recall labels*; the next
//! model is trained to reproduce them for old categories while learning the
//! new ones, so no past training data is ever revisited.
//!
//! Module map:
//! - [`math`]: dense kernels, activations, softmax, initialization
//! - [`model`]: the multi-head network, expansion and checkpoints
//! - [`losses`]: recall, classification and regression losses
//! - [`trainer`]: the per-sequence procedure, optimizers and curricula
//! - [`data`]: feature files, manifests, splits and synthetic benchmarks
//! - [`metrics`]: accuracy matrices, logit variance and forgetting
//! - [`parallel`]: deterministic map-reduce over example shards

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod codec;
pub mod data;
pub mod error;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
