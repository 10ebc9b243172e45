//! Single-pass associative knowledge-graph retrieval for reasoning rollouts.
//!
//! The engine holds a triplet store, an entity embedding index and the two
//! retrieval tools, drives three-turn rollouts against a policy backend,
//! scores them with a curriculum reward and computes the clipped group
//! policy objective over the recorded trajectories.

pub mod config;
pub mod embedding;
pub mod eval;
pub mod grpo;
pub mod kg;
pub mod policy;
pub mod prompt;
pub mod reward;
pub mod rollout;
pub mod server;
pub mod tags;
pub mod tools;

/// Default number of neighbours per extracted entity.
pub const DEFAULT_P: usize = 3;
