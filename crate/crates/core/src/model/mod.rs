//! Problem data: subsystem dynamics, horizon, initial law, and the
//! combinatorics of the mean-field space.
//!
//! Stages are 0-based throughout the crate: stage 0 is the first decision
//! epoch.

mod coordination;
mod meanfield;

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

pub use coordination::{map_count, CoordinationMap, MapSpace};
pub(crate) use meanfield::ln_factorial;
pub use meanfield::{
    class_size, composition_count, enumerate_mean_fields, ln_class_size, mean_field_of, rank,
    unrank, MeanField, MeanFieldSpace,
};

use crate::error::{Error, Result};
use crate::lifted::CostSpec;

/// Tolerance for row sums of transition matrices and probability vectors.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// A row-stochastic `k x k` matrix, row-major. Entry `(x, y)` is the
/// probability of moving from local state `x` to `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl StochasticMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::from_rows_at(rows, "matrix")
    }

    /// Like [`StochasticMatrix::from_rows`], with `path` prefixed to error messages.
    pub fn from_rows_at(rows: &[Vec<f64>], path: &str) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(Error::invalid(path, "matrix has no rows"));
        }
        let mut data = Vec::with_capacity(dim * dim);
        for (x, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::invalid(
                    format!("{path}[{x}]"),
                    format!("row has {} entries, expected {dim}", row.len()),
                ));
            }
            check_distribution(row, &format!("{path}[{x}]"))?;
            data.extend_from_slice(row);
        }
        Ok(StochasticMatrix { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for x in 0..dim {
            data[x * dim + x] = 1.0;
        }
        StochasticMatrix { dim, data }
    }

    /// Convex combination `(1 - w) a + w b`.
    pub fn mix(a: &StochasticMatrix, b: &StochasticMatrix, w: f64) -> Result<Self> {
        if a.dim != b.dim {
            return Err(Error::DimensionMismatch(
                "mixing matrices of different size".into(),
            ));
        }
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&p, &q)| (1.0 - w) * p + w * q)
            .collect();
        Ok(StochasticMatrix { dim: a.dim, data })
    }

    /// All mass of every row on `target`.
    pub fn forcing(dim: usize, target: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for x in 0..dim {
            data[x * dim + target] = 1.0;
        }
        StochasticMatrix { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.data[x * self.dim..(x + 1) * self.dim]
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[x * self.dim + y]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|x| self.row(x).to_vec()).collect()
    }
}

/// Checks nonnegativity and unit sum within [`STOCHASTIC_TOL`].
pub fn check_distribution(p: &[f64], path: &str) -> Result<()> {
    if let Some(i) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(
            format!("{path}[{i}]"),
            format!("probability {} is negative or not finite", p[i]),
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::invalid(
            path,
            format!("probabilities sum to {sum}, not 1"),
        ));
    }
    Ok(())
}

/// Per-action transition matrices evaluated at a mean-field and stage.
pub type MeanFieldTransitionFn = dyn Fn(&MeanField, usize) -> Vec<StochasticMatrix> + Send + Sync;

/// Subsystem dynamics `P(u)`, one stochastic matrix per action.
#[derive(Clone)]
pub enum Dynamics {
    Homogeneous(Vec<StochasticMatrix>),
    /// One matrix list per stage.
    Staged(Vec<Vec<StochasticMatrix>>),
    /// Dynamics that read the current mean-field. The flag states whether the
    /// function ignores the stage argument.
    MeanFieldDependent {
        f: Arc<MeanFieldTransitionFn>,
        time_homogeneous: bool,
    },
}

impl fmt::Debug for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dynamics::Homogeneous(m) => f.debug_tuple("Homogeneous").field(m).finish(),
            Dynamics::Staged(m) => f.debug_tuple("Staged").field(m).finish(),
            Dynamics::MeanFieldDependent {
                time_homogeneous, ..
            } => f
                .debug_struct("MeanFieldDependent")
                .field("time_homogeneous", time_homogeneous)
                .finish_non_exhaustive(),
        }
    }
}

impl Dynamics {
    /// Matrices in force at `stage` when the mean-field is `z`.
    pub fn matrices(&self, z: &MeanField, stage: usize) -> Cow<'_, [StochasticMatrix]> {
        match self {
            Dynamics::Homogeneous(m) => Cow::Borrowed(m),
            Dynamics::Staged(stages) => Cow::Borrowed(&stages[stage.min(stages.len() - 1)]),
            Dynamics::MeanFieldDependent { f, .. } => Cow::Owned(f(z, stage)),
        }
    }

    pub fn is_time_homogeneous(&self) -> bool {
        match self {
            Dynamics::Homogeneous(_) => true,
            Dynamics::Staged(s) => s.len() <= 1,
            Dynamics::MeanFieldDependent {
                time_homogeneous, ..
            } => *time_homogeneous,
        }
    }

    fn validate(&self, k: usize, num_actions: usize, horizon: &Horizon) -> Result<()> {
        let check = |mats: &[StochasticMatrix], path: &str| -> Result<()> {
            if mats.len() != num_actions {
                return Err(Error::invalid(
                    path,
                    format!("{} matrices given for {num_actions} actions", mats.len()),
                ));
            }
            for (u, m) in mats.iter().enumerate() {
                if m.dim() != k {
                    return Err(Error::invalid(
                        format!("{path}[{u}]"),
                        format!("matrix is {0}x{0}, expected {k}x{k}", m.dim()),
                    ));
                }
            }
            Ok(())
        };
        match self {
            Dynamics::Homogeneous(m) => check(m, "transition"),
            Dynamics::Staged(stages) => {
                if stages.is_empty() {
                    return Err(Error::invalid("transition.stages", "no stages given"));
                }
                if let Horizon::Finite(t) = horizon {
                    if stages.len() != *t {
                        return Err(Error::invalid(
                            "transition.stages",
                            format!("{} stages given for horizon {t}", stages.len()),
                        ));
                    }
                }
                for (t, m) in stages.iter().enumerate() {
                    check(m, &format!("transition.stages[{t}]"))?;
                }
                Ok(())
            }
            // checked per row when the kernel is built
            Dynamics::MeanFieldDependent { .. } => Ok(()),
        }
    }
}

/// Planning horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Horizon {
    /// `T` stages, undiscounted.
    Finite(usize),
    /// Infinite horizon with discount factor `β ∈ (0, 1)`. Stage `t` (0-based)
    /// is weighted by `β^t`.
    Discounted(f64),
}

impl Horizon {
    pub fn discount(&self) -> f64 {
        match self {
            Horizon::Finite(_) => 1.0,
            Horizon::Discounted(b) => *b,
        }
    }
}

/// Everything needed to pose the team problem for `n` identical subsystems.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    n: usize,
    k: usize,
    num_actions: usize,
    dynamics: Dynamics,
    cost: CostSpec,
    horizon: Horizon,
    init_dist: Vec<f64>,
}

impl ModelSpec {
    pub fn new(
        n: usize,
        k: usize,
        num_actions: usize,
        dynamics: Dynamics,
        cost: CostSpec,
        horizon: Horizon,
        init_dist: Vec<f64>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n", "must be positive"));
        }
        if n > u32::MAX as usize {
            return Err(Error::invalid("n", "too large"));
        }
        if k == 0 {
            return Err(Error::invalid("k", "must be positive"));
        }
        if num_actions == 0 {
            return Err(Error::invalid("actions", "must be positive"));
        }
        match horizon {
            Horizon::Finite(0) => return Err(Error::invalid("horizon.stages", "must be positive")),
            Horizon::Discounted(b) if !(b > 0.0 && b < 1.0) => {
                return Err(Error::invalid(
                    "horizon.beta",
                    format!("discount {b} is outside (0, 1)"),
                ))
            }
            _ => {}
        }
        if init_dist.len() != k {
            return Err(Error::invalid(
                "init_dist",
                format!("{} entries given for {k} states", init_dist.len()),
            ));
        }
        check_distribution(&init_dist, "init_dist")?;
        dynamics.validate(k, num_actions, &horizon)?;
        cost.validate(n, k, num_actions, &horizon)?;
        if matches!(horizon, Horizon::Discounted(_))
            && !(dynamics.is_time_homogeneous() && cost.is_time_homogeneous())
        {
            return Err(Error::Unsupported(
                "time-varying dynamics or cost with an infinite horizon".into(),
            ));
        }
        Ok(ModelSpec {
            n,
            k,
            num_actions,
            dynamics,
            cost,
            horizon,
            init_dist,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn cost(&self) -> &CostSpec {
        &self.cost
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.init_dist
    }

    pub fn discount(&self) -> f64 {
        self.horizon.discount()
    }

    pub fn is_time_homogeneous(&self) -> bool {
        self.dynamics.is_time_homogeneous() && self.cost.is_time_homogeneous()
    }

    /// Stage count for finite horizons, 1 for discounted models.
    pub fn stage_count(&self) -> usize {
        match self.horizon {
            Horizon::Finite(t) => t,
            Horizon::Discounted(_) => 1,
        }
    }

    pub fn mean_field_space(&self) -> MeanFieldSpace {
        MeanFieldSpace::new(self.n, self.k)
    }

    pub fn map_space(&self) -> MapSpace {
        MapSpace::new(self.k, self.num_actions)
    }

    /// Same model with the cost replaced.
    pub fn with_cost(&self, cost: CostSpec) -> Result<Self> {
        ModelSpec::new(
            self.n,
            self.k,
            self.num_actions,
            self.dynamics.clone(),
            cost,
            self.horizon,
            self.init_dist.clone(),
        )
    }

    /// Same model with the horizon replaced.
    pub fn with_horizon(&self, horizon: Horizon) -> Result<Self> {
        ModelSpec::new(
            self.n,
            self.k,
            self.num_actions,
            self.dynamics.clone(),
            self.cost.clone(),
            horizon,
            self.init_dist.clone(),
        )
    }
}
