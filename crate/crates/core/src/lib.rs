//! Team-optimal control of `n` identical stochastic subsystems coupled
//! through their empirical state distribution (the mean-field).
//!
//! Every controller sees its own local state and the current mean-field
//! (or a noisy reading of it). Restricting to identical control laws, the
//! mean-field is an information state: the problem reduces to an MDP on the
//! finite simplex `M_n` whose decision is a coordination map `γ: X -> U`.
//!
//! - [`model`]: problem data and the combinatorics of `M_n`.
//! - [`lifted`]: exact lifted cost and next-mean-field kernel.
//! - [`mdp`]: backward induction, discounted value iteration, policy evaluation.
//! - [`pomdp`]: belief filtering over `M_n` and exact belief-tree search.
//! - [`sim`]: seeded Monte Carlo simulation of the full `n`-subsystem system.
//! - [`oracle`]: brute-force references over the joint space, for validation.
//! - [`config`]: TOML model files.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod exec;
pub mod lifted;
pub mod mdp;
pub mod model;
pub mod models;
pub mod oracle;
pub mod pomdp;
pub mod sim;

pub use error::{Error, ErrorClass, Result};
pub use exec::Execution;
pub use lifted::{build_lifted_mdp, lift_cost, lift_kernel_row, CostSpec, LiftedMdp};
pub use model::{CoordinationMap, Dynamics, Horizon, MeanField, MeanFieldSpace, ModelSpec};
