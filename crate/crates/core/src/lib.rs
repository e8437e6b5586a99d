//! Multi-agent black-box optimizer for joint configuration of multi-module
//! pipelines.
//!
//! Each pipeline module (augmentation, architecture, hyper-parameters, ...)
//! acts as an agent over a categorical action space. A centralized critic
//! scores joint actions, counterfactual baselines assign per-agent credit,
//! and divergence-regularized off-policy updates with slow-moving target
//! policies keep the search monotone in expectation. The `verify` module
//! certifies that monotonicity exactly on enumerable spaces.

pub mod critic;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod space;
pub mod trainer;
pub mod verify;
