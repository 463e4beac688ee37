//! Quadruped locomotion lab.
//!
//! The pipeline: a DDP model-predictive expert ([`mpc`]) drives the
//! simulator ([`sim`]); DAgger ([`imitation`]) clones it into an MLP policy
//! ([`policy`]); PPO ([`rl`]) finetunes that policy on procedural terrain
//! ([`terrain`]); [`metrics`] scores logged trajectories.

pub mod env;
pub mod error;
pub mod eval;
pub mod imitation;
pub mod metrics;
pub mod mpc;
pub mod policy;
pub mod rl;
pub mod sim;
pub mod terrain;
pub mod trajectory;

pub use error::{Error, Result};
