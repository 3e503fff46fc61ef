//! Web-navigation benchmark and agent-training harness.
//!
//! The crate bundles small MiniWoB-style task environments over a symbolic
//! DOM, a demonstration-cleaning pipeline, a rule-based hierarchical
//! planner, a tiny policy network with hand-written gradients, behavioral
//! cloning and V-MPO trainers, and an evaluation harness for reference
//! randomization and input ablations.

pub mod agent;
pub mod dom;
pub mod env;
pub mod pipeline;
pub mod planner;
pub mod text;
pub mod eval;
pub mod trainer;
pub mod cli;
