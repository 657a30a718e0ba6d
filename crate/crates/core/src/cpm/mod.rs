//! The causal process model: blocks, controllers, rewards, the batched
//! transition and time-unrolled graphs.

pub mod blocks;
pub mod graph;
pub mod policy;
pub mod reward;
pub mod transition;

pub use blocks::{CausalBlock, Parents};
pub use graph::{layer_step, CausalGraph, Controller, ForceNode, Origin};
pub use policy::{AttributionPolicy, Scope, ScopePolicy};
pub use reward::RewardHeads;
pub use transition::{Choice, CpmNet, StepOut};
