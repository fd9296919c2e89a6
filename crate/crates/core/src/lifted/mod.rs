//! The lifted cost and kernel that make the mean-field an information state,
//! and the tables that materialise them for the solvers.
//!
//! Nothing here takes a policy: both quantities depend only on the model,
//! the current mean-field and the coordination map.

mod cost;
mod kernel;
mod tables;

pub use cost::{
    kl_divergence, lift_cost, CostEstimate, CostSpec, ExchangeableFn, GeneralCost, JointCostFn,
    PermutationSampling, SmartGridCost, DEFAULT_ENUMERATION_BUDGET,
};
pub use kernel::{lift_kernel_row, multinomial_pmf, ROW_SUM_TOL};
pub use tables::{
    build_lifted_mdp, build_lifted_mdp_with, BuildOptions, KernelEntry, LiftedMdp, StageTables,
    DEFAULT_MEMORY_BUDGET,
};
