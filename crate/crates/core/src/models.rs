//! Bundled problem instances.

use crate::error::Result;
use crate::lifted::{CostSpec, SmartGridCost};
use crate::model::{Dynamics, Horizon, ModelSpec, StochasticMatrix};

/// Natural dynamics of one device.
pub fn smart_grid_natural() -> StochasticMatrix {
    StochasticMatrix::from_rows(&[vec![0.25, 0.75], vec![0.375, 0.625]])
        .expect("constant matrix is stochastic")
}

/// `P(0) = Q`, and `P(u) = (1 − ε_u) K_u + ε_u Q` for each forcing action,
/// where `K_u` sends every state to `u − 1`.
pub fn forcing_dynamics(
    natural: &StochasticMatrix,
    epsilons: &[f64],
) -> Result<Vec<StochasticMatrix>> {
    let mut mats = vec![natural.clone()];
    for (i, &eps) in epsilons.iter().enumerate() {
        mats.push(StochasticMatrix::mix(
            &StochasticMatrix::forcing(natural.dim(), i),
            natural,
            eps,
        )?);
    }
    Ok(mats)
}

/// 100 devices with two states, one free and two forcing actions, tracking
/// the reference `(0.7, 0.3)` under discount 0.9.
pub fn smart_grid() -> ModelSpec {
    let q = smart_grid_natural();
    let mats = forcing_dynamics(&q, &[0.2, 0.2]).expect("valid forcing weights");
    let cost = SmartGridCost::new(vec![0.0, 0.1, 0.2], vec![0.7, 0.3]).expect("positive reference");
    ModelSpec::new(
        100,
        2,
        3,
        Dynamics::Homogeneous(mats),
        CostSpec::SmartGrid(cost),
        Horizon::Discounted(0.9),
        vec![1.0 / 3.0, 2.0 / 3.0],
    )
    .expect("bundled model is valid")
}

/// Two subsystems, two states, two actions, two stages. Each subsystem moves
/// to the state named by its action; the second stage costs `penalty` unless
/// the subsystems occupy different states.
///
/// Identical control laws cannot separate two subsystems that start in the
/// same state, so the best symmetric cost is `penalty / 2`, while "subsystem
/// `i` plays `i`" costs nothing.
pub fn counterexample(penalty: f64) -> ModelSpec {
    let mats = vec![
        StochasticMatrix::forcing(2, 0),
        StochasticMatrix::forcing(2, 1),
    ];
    let spread = CostSpec::general(move |x, _| if x[0] != x[1] { 0.0 } else { penalty });
    ModelSpec::new(
        2,
        2,
        2,
        Dynamics::Homogeneous(mats),
        CostSpec::Staged(vec![CostSpec::general(|_, _| 0.0), spread]),
        Horizon::Finite(2),
        vec![0.5, 0.5],
    )
    .expect("bundled model is valid")
}
