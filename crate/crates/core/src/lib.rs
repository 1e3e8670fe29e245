//! Policy evaluation with probabilistic adaptive state aggregation (PASA).
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: near-deterministic finite MDPs, fixed policies, exact solvers.
//! - [`skeleton`]: cycle decomposition of the deterministic skeleton map and
//!   the random-mapping cycle statistics.
//! - [`aggregation`]: the interval partition tree driven by the split vector.
//! - [`pasa`]: visit-frequency tracking and split reselection.
//! - [`rl`]: the cell-action weight table and its SARSA(0) learner.
//! - [`metrics`]: the Bellman-residual score `L` and the weighted MSE.
//! - [`harness`]: seeded experiments, persistence and the CLI plumbing.
//!
//! States, actions and cells are 0-based throughout.

pub mod aggregation;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod mdp;
pub mod pasa;
pub mod rl;
pub mod rng;
pub mod skeleton;

pub use error::{Error, Result};
