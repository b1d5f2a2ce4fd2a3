//! Structured pruning of a desk-scale decoder-only transformer.
//!
//! The pipeline runs in four stages:
//!
//! 1. **Discovery** ([`groups`]): enumerate attention heads and MLP
//!    channels with the weight slices each owns.
//! 2. **Estimation** ([`importance`]): score every group under every
//!    calibration sample with a vector-wise and an element-wise Taylor
//!    estimate.
//! 3. **Pruning** ([`fusion`], [`plan`], [`prune`]): fuse the two scores,
//!    measure how much each group's fused score fluctuates across samples,
//!    and remove the most volatile groups within per-layer budgets.
//! 4. **Recovery** ([`quant`]): freeze the pruned weights in grouped 4-bit
//!    form and train grouped low-rank adapters that merge back exactly.
//!
//! [`eval`] measures perplexity and generation throughput between stages.

mod error;
pub mod eval;
pub mod fusion;
pub mod groups;
pub mod hash;
pub mod importance;
pub mod model;
pub mod optim;
pub mod plan;
pub mod prune;
pub mod quant;

pub use error::{Error, Result};
