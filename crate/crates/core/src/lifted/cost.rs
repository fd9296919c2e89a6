use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use num_traits::ToPrimitive;
use rand::rngs::ChaCha8Rng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::model::{
    check_distribution, class_size, mean_field_of, CoordinationMap, Horizon, MeanField, ModelSpec,
};

/// Cost that depends on the joint state only through `(z, γ)`.
pub type ExchangeableFn = dyn Fn(&MeanField, &CoordinationMap) -> f64 + Send + Sync;

/// Cost `ℓ(x, u)` over joint states and joint actions.
pub type JointCostFn = dyn Fn(&[usize], &[usize]) -> f64 + Send + Sync;

/// Default cap on `|H(z)|` for exact averaging of a general cost.
pub const DEFAULT_ENUMERATION_BUDGET: u64 = 1_000_000;

/// Per-step cost `ℓ_t`.
#[derive(Clone)]
pub enum CostSpec {
    /// `Σ_x z(x) c(γ(x)) + D(z ‖ ζ)`: mean action cost plus KL tracking of a reference.
    SmartGrid(SmartGridCost),
    Exchangeable(Arc<ExchangeableFn>),
    General(GeneralCost),
    /// One cost per stage.
    Staged(Vec<CostSpec>),
}

impl fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostSpec::SmartGrid(c) => f.debug_tuple("SmartGrid").field(c).finish(),
            CostSpec::Exchangeable(_) => f.write_str("Exchangeable(..)"),
            CostSpec::General(g) => f
                .debug_struct("General")
                .field("enumeration_budget", &g.enumeration_budget)
                .field("sampling", &g.sampling)
                .finish_non_exhaustive(),
            CostSpec::Staged(s) => f.debug_tuple("Staged").field(s).finish(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmartGridCost {
    action_costs: Vec<f64>,
    reference: Vec<f64>,
}

impl SmartGridCost {
    /// `action_costs[u] = c(u)`; `reference = ζ`, which must be strictly positive.
    pub fn new(action_costs: Vec<f64>, reference: Vec<f64>) -> Result<Self> {
        if let Some(u) = action_costs.iter().position(|c| !c.is_finite()) {
            return Err(Error::invalid(
                format!("cost.action_costs[{u}]"),
                "not finite",
            ));
        }
        check_distribution(&reference, "cost.reference")?;
        if let Some(x) = reference.iter().position(|&q| q <= 0.0) {
            return Err(Error::invalid(
                format!("cost.reference[{x}]"),
                "reference distribution must be strictly positive",
            ));
        }
        Ok(SmartGridCost {
            action_costs,
            reference,
        })
    }

    pub fn action_costs(&self) -> &[f64] {
        &self.action_costs
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn evaluate(&self, z: &MeanField, map: &CoordinationMap) -> Result<f64> {
        let fractions = z.fractions();
        let action: f64 = fractions
            .iter()
            .enumerate()
            .map(|(x, p)| p * self.action_costs[map.action(x)])
            .sum();
        Ok(action + kl_divergence(&fractions, &self.reference)?)
    }

    fn evaluate_joint(&self, z: &MeanField, actions: &[usize]) -> Result<f64> {
        let n = actions.len() as f64;
        let action: f64 = actions.iter().map(|&u| self.action_costs[u]).sum::<f64>() / n;
        Ok(action + kl_divergence(&z.fractions(), &self.reference)?)
    }
}

/// Monte Carlo fallback for general costs whose `|H(z)|` exceeds the enumeration budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PermutationSampling {
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone)]
pub struct GeneralCost {
    f: Arc<JointCostFn>,
    enumeration_budget: u64,
    sampling: Option<PermutationSampling>,
}

impl GeneralCost {
    pub fn new(f: Arc<JointCostFn>) -> Self {
        GeneralCost {
            f,
            enumeration_budget: DEFAULT_ENUMERATION_BUDGET,
            sampling: None,
        }
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.enumeration_budget = budget;
        self
    }

    pub fn with_sampling(mut self, sampling: PermutationSampling) -> Self {
        self.sampling = Some(sampling);
        self
    }

    pub fn eval(&self, states: &[usize], actions: &[usize]) -> f64 {
        (self.f)(states, actions)
    }
}

/// Natural-log KL divergence `D(p ‖ q)` with `0 log(0/q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut d = 0.0;
    for (x, (&px, &qx)) in p.iter().zip(q).enumerate() {
        if px > 0.0 {
            if qx <= 0.0 {
                return Err(Error::KlDomain { state: x });
            }
            d += px * (px / qx).ln();
        }
    }
    // rounding can leave tiny negatives when p == q
    Ok(d.max(0.0))
}

/// A lifted cost value. Exact results have `std_error == 0` and `samples == None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: Option<usize>,
}

impl CostEstimate {
    fn exact(value: f64) -> Self {
        CostEstimate {
            value,
            std_error: 0.0,
            samples: None,
        }
    }
}

impl CostSpec {
    pub fn zero() -> Self {
        CostSpec::Exchangeable(Arc::new(|_, _| 0.0))
    }

    pub fn exchangeable<F>(f: F) -> Self
    where
        F: Fn(&MeanField, &CoordinationMap) -> f64 + Send + Sync + 'static,
    {
        CostSpec::Exchangeable(Arc::new(f))
    }

    pub fn general<F>(f: F) -> Self
    where
        F: Fn(&[usize], &[usize]) -> f64 + Send + Sync + 'static,
    {
        CostSpec::General(GeneralCost::new(Arc::new(f)))
    }

    pub fn is_time_homogeneous(&self) -> bool {
        match self {
            CostSpec::Staged(s) => s.len() <= 1,
            _ => true,
        }
    }

    /// Cost in force at `stage`.
    pub fn at_stage(&self, stage: usize) -> &CostSpec {
        match self {
            CostSpec::Staged(s) => s[stage.min(s.len() - 1)].at_stage(stage),
            other => other,
        }
    }

    /// Whether the stage cost is declared to depend only on `(z, γ)`.
    pub fn is_exchangeable(&self, stage: usize) -> bool {
        matches!(
            self.at_stage(stage),
            CostSpec::SmartGrid(_) | CostSpec::Exchangeable(_)
        )
    }

    pub(crate) fn validate(
        &self,
        _n: usize,
        k: usize,
        num_actions: usize,
        horizon: &Horizon,
    ) -> Result<()> {
        match self {
            CostSpec::SmartGrid(c) => {
                if c.action_costs.len() != num_actions {
                    return Err(Error::invalid(
                        "cost.action_costs",
                        format!("{} costs for {num_actions} actions", c.action_costs.len()),
                    ));
                }
                if c.reference.len() != k {
                    return Err(Error::invalid(
                        "cost.reference",
                        format!("{} entries for {k} states", c.reference.len()),
                    ));
                }
                Ok(())
            }
            CostSpec::Staged(stages) => {
                if stages.is_empty() {
                    return Err(Error::invalid("cost.stages", "no stages given"));
                }
                if let Horizon::Finite(t) = horizon {
                    if stages.len() != *t {
                        return Err(Error::invalid(
                            "cost.stages",
                            format!("{} stage costs for horizon {t}", stages.len()),
                        ));
                    }
                }
                for s in stages {
                    if matches!(s, CostSpec::Staged(_)) {
                        return Err(Error::invalid("cost.stages", "nested stage lists"));
                    }
                    s.validate(_n, k, num_actions, horizon)?;
                }
                Ok(())
            }
            CostSpec::Exchangeable(_) | CostSpec::General(_) => Ok(()),
        }
    }

    /// `ℓ_t(x, u)` on a concrete joint state and joint action.
    ///
    /// Exchangeable closures need the coordination map; it is reconstructed
    /// from the joint action when all subsystems in a state agree.
    pub fn joint_cost(
        &self,
        stage: usize,
        states: &[usize],
        actions: &[usize],
        k: usize,
        map: Option<&CoordinationMap>,
    ) -> Result<f64> {
        let value = match self.at_stage(stage) {
            CostSpec::SmartGrid(c) => c.evaluate_joint(&mean_field_of(states, k)?, actions)?,
            CostSpec::General(g) => g.eval(states, actions),
            CostSpec::Exchangeable(f) => {
                let z = mean_field_of(states, k)?;
                match map {
                    Some(m) => f(&z, m),
                    None => f(&z, &symmetric_map(states, actions, k)?),
                }
            }
            CostSpec::Staged(_) => unreachable!("at_stage resolves stage lists"),
        };
        finite(value)
    }
}

fn symmetric_map(states: &[usize], actions: &[usize], k: usize) -> Result<CoordinationMap> {
    let mut assignment: Vec<Option<usize>> = vec![None; k];
    for (&x, &u) in states.iter().zip(actions) {
        match assignment[x] {
            None => assignment[x] = Some(u),
            Some(prev) if prev == u => {}
            Some(_) => {
                return Err(Error::Unsupported(
                    "exchangeable cost under an asymmetric joint action".into(),
                ))
            }
        }
    }
    let assignment = assignment.into_iter().map(|u| u.unwrap_or(0)).collect();
    CoordinationMap::new(assignment, usize::MAX)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("per-step cost evaluated to {v}")))
    }
}

/// Lifted cost `ĥℓ_t(z, γ)`: the expected per-step cost when the joint state
/// is uniform on `H(z)` and every controller applies `γ`.
pub fn lift_cost(
    model: &ModelSpec,
    z: &MeanField,
    map: &CoordinationMap,
    stage: usize,
) -> Result<CostEstimate> {
    match model.cost().at_stage(stage) {
        CostSpec::SmartGrid(c) => Ok(CostEstimate::exact(finite(c.evaluate(z, map)?)?)),
        CostSpec::Exchangeable(f) => Ok(CostEstimate::exact(finite(f(z, map))?)),
        CostSpec::General(g) => lift_general(g, z, map, stage),
        CostSpec::Staged(_) => unreachable!("at_stage resolves stage lists"),
    }
}

fn lift_general(
    g: &GeneralCost,
    z: &MeanField,
    map: &CoordinationMap,
    stage: usize,
) -> Result<CostEstimate> {
    let size = class_size(z);
    let exact_budget = num_bigint::BigUint::from(g.enumeration_budget);
    if size <= exact_budget {
        let mut states = z.sorted_joint_state();
        let mut actions = vec![0; states.len()];
        let mut total = 0.0;
        let mut count = 0u64;
        loop {
            for (u, &x) in actions.iter_mut().zip(&states) {
                *u = map.action(x);
            }
            total += finite(g.eval(&states, &actions))?;
            count += 1;
            if !next_permutation(&mut states) {
                break;
            }
        }
        return Ok(CostEstimate::exact(total / count as f64));
    }
    let Some(sampling) = g.sampling else {
        return Err(Error::BudgetExceeded {
            what: "exact averaging over H(z)",
            required: size.to_u128().unwrap_or(u128::MAX),
            budget: u128::from(g.enumeration_budget),
        });
    };
    if sampling.samples < 2 {
        return Err(Error::invalid(
            "cost.sampling.samples",
            "need at least 2 samples",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    rng.set_stream(sample_stream(z, map, stage));
    let mut states = z.sorted_joint_state();
    let mut actions = vec![0; states.len()];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..sampling.samples {
        states.shuffle(&mut rng);
        for (u, &x) in actions.iter_mut().zip(&states) {
            *u = map.action(x);
        }
        let v = finite(g.eval(&states, &actions))?;
        sum += v;
        sum_sq += v * v;
    }
    let m = sampling.samples as f64;
    let mean = sum / m;
    let var = ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0);
    Ok(CostEstimate {
        value: mean,
        std_error: (var / m).sqrt(),
        samples: Some(sampling.samples),
    })
}

fn sample_stream(z: &MeanField, map: &CoordinationMap, stage: usize) -> u64 {
    let mut h = std::hash::DefaultHasher::new();
    z.counts().hash(&mut h);
    map.assignment().hash(&mut h);
    stage.hash(&mut h);
    h.finish()
}

/// Advances to the next lexicographic permutation; `false` after the last one.
/// Repeated values are visited once per distinct arrangement.
fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}
