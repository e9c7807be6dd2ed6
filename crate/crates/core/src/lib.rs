//! A small decoder-only transformer with a pluggable, per-head KV-cache
//! eviction layer, plus the tooling to measure how much attention each
//! eviction policy throws away.
//!
//! The central question is whether the L2 norm of a cached key predicts how
//! much attention that key will receive: keys with low norms tend to attract
//! high attention, so keeping the low-norm keys and evicting the rest should
//! lose little. [`analysis`] quantifies this against the attention-score
//! oracle and [`workloads`] measures it end to end on retrieval tasks.

pub mod analysis;
mod error;
pub mod kv_cache;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod workloads;

pub use error::{Error, Result};
pub use kv_cache::{Budget, CompressionConfig, LayerHeadCache, Policy};
pub use model::{Model, ModelConfig, ModelWeights};
pub use tensor::Tensor2D;
