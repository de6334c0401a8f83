//! Sequential multi-agent trust-region updates under a shared KL budget.
//!
//! Agents update one after another inside each iteration; a total KL budget is
//! split across them uniformly, greedily by gain per unit KL, or by
//! water-filling on advantage-based utilities. Two analyzable games are
//! provided: an N-agent sparse-reward matrix game and a two-player continuous
//! game with a local and a global optimum.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod allocation;
pub mod config;
pub mod error;
pub mod games;
pub mod policy;
pub mod runlog;
pub mod selftest;
pub mod trainer;
pub mod trust_step;

pub use allocation::{KLAllocation, Strategy};
pub use config::{load_config, parse_config};
pub use error::{Error, Result};
pub use games::{DifferentialGameSpec, Game, MatrixGameSpec, RewardVariant};
pub use policy::{JointPolicy, PolicyParams};
pub use trainer::{train, EnvKind, IterationRecord, RunConfig, RunHistory, Trainer};
