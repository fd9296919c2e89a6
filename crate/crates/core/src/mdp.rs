//! Dynamic programming over the mean-field space.
//!
//! Finite horizons use backward induction from `V_T ≡ 0`. Discounted models
//! use value iteration stopped by the contraction bound, so the requested
//! tolerance bounds the distance to the true optimal value, not just the
//! last update. Both share one backup routine. Ties in the minimisation over
//! coordination maps go to the lowest map index.

use std::io::Write;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lifted::{multinomial_pmf, LiftedMdp, StageTables};
use crate::model::{CoordinationMap, Horizon, MapSpace, MeanFieldSpace, ModelSpec};

/// Default tolerance for iterative policy evaluation.
pub const DEFAULT_EVAL_TOL: f64 = 1e-10;

const MAX_ITERATIONS: usize = 1_000_000;

/// `ψ_t: M_n -> γ`, stored as map indices per stage and mean-field rank.
/// A stationary policy has a single stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Policy {
    stages: Vec<Vec<usize>>,
}

impl Policy {
    pub fn new(stages: Vec<Vec<usize>>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::DimensionMismatch("policy has no stages".into()));
        }
        let len = stages[0].len();
        if stages.iter().any(|s| s.len() != len) {
            return Err(Error::DimensionMismatch(
                "policy stages differ in length".into(),
            ));
        }
        Ok(Policy { stages })
    }

    pub fn stationary(maps: Vec<usize>) -> Self {
        Policy { stages: vec![maps] }
    }

    /// The same map at every mean-field.
    pub fn constant(num_states: usize, map: usize) -> Self {
        Policy::stationary(vec![map; num_states])
    }

    pub fn is_stationary(&self) -> bool {
        self.stages.len() == 1
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn num_states(&self) -> usize {
        self.stages[0].len()
    }

    /// Map index at `(stage, rank)`; stationary policies ignore the stage.
    pub fn map_at(&self, stage: usize, z: usize) -> usize {
        let s = if self.is_stationary() { 0 } else { stage };
        self.stages[s][z]
    }

    pub fn stages(&self) -> &[Vec<usize>] {
        &self.stages
    }

    fn check(&self, lifted: &LiftedMdp, stages_needed: Option<usize>) -> Result<()> {
        if self.num_states() != lifted.num_states() {
            return Err(Error::DimensionMismatch(format!(
                "policy covers {} mean-fields, model has {}",
                self.num_states(),
                lifted.num_states()
            )));
        }
        if let Some(t) = stages_needed {
            if !self.is_stationary() && self.stage_count() != t {
                return Err(Error::DimensionMismatch(format!(
                    "policy has {} stages, horizon is {t}",
                    self.stage_count()
                )));
            }
        }
        if let Some(bad) = self
            .stages
            .iter()
            .flatten()
            .find(|&&g| g >= lifted.num_maps())
        {
            return Err(Error::IndexOutOfRange {
                index: *bad,
                len: lifted.num_maps(),
            });
        }
        Ok(())
    }
}

/// `V_t(z)` per stage and rank. Finite-horizon values carry the terminal
/// stage `V_T ≡ 0` as their last entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueFunction {
    stages: Vec<Vec<f64>>,
}

impl ValueFunction {
    pub fn stages(&self) -> &[Vec<f64>] {
        &self.stages
    }

    pub fn stage(&self, t: usize) -> &[f64] {
        &self.stages[t]
    }

    /// Values at the first decision epoch.
    pub fn initial(&self) -> &[f64] {
        &self.stages[0]
    }
}

#[derive(Clone, Debug)]
pub struct FiniteSolution {
    pub policy: Policy,
    pub values: ValueFunction,
}

#[derive(Clone, Debug)]
pub struct DiscountedSolution {
    pub policy: Policy,
    pub values: ValueFunction,
    pub iterations: usize,
    /// Sup-norm of each value-iteration update, in order.
    pub update_norms: Vec<f64>,
    /// Certified bound on `‖V − V*‖_∞` for the returned values.
    pub value_error_bound: f64,
}

/// One Bellman backup at every mean-field:
/// `min_γ [cost(z, γ) + discount · Σ_z' P(z'|z,γ) next(z')]`.
pub fn bellman_backup(
    tables: &StageTables,
    next: &[f64],
    discount: f64,
    exec: Execution,
) -> (Vec<f64>, Vec<usize>) {
    let pairs = exec.map_range(tables.num_states(), |z| {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for g in 0..tables.num_maps() {
            let q = tables.cost(z, g) + discount * tables.expect(z, g, next);
            if q < best {
                best = q;
                arg = g;
            }
        }
        (best, arg)
    });
    pairs.into_iter().unzip()
}

fn policy_backup(
    tables: &StageTables,
    next: &[f64],
    discount: f64,
    maps: &[usize],
    exec: Execution,
) -> Vec<f64> {
    exec.map_range(tables.num_states(), |z| {
        let g = maps[z];
        tables.cost(z, g) + discount * tables.expect(z, g, next)
    })
}

fn finite_horizon(model: &ModelSpec) -> Result<usize> {
    match model.horizon() {
        Horizon::Finite(t) => Ok(t),
        Horizon::Discounted(_) => Err(Error::Unsupported(
            "finite-horizon solve on a discounted model".into(),
        )),
    }
}

pub fn solve_finite_horizon(model: &ModelSpec, lifted: &LiftedMdp) -> Result<FiniteSolution> {
    solve_finite_horizon_with(model, lifted, Execution::default())
}

pub fn solve_finite_horizon_with(
    model: &ModelSpec,
    lifted: &LiftedMdp,
    exec: Execution,
) -> Result<FiniteSolution> {
    let horizon = finite_horizon(model)?;
    let mut values = vec![vec![0.0; lifted.num_states()]; horizon + 1];
    let mut maps = vec![Vec::new(); horizon];
    for t in (0..horizon).rev() {
        let (v, g) = bellman_backup(lifted.stage(t)?, &values[t + 1], 1.0, exec);
        values[t] = v;
        maps[t] = g;
    }
    Ok(FiniteSolution {
        policy: Policy { stages: maps },
        values: ValueFunction { stages: values },
    })
}

#[derive(Clone, Copy, Debug)]
pub struct DiscountedOptions {
    /// Target bound on `‖V − V*‖_∞`.
    pub tol: f64,
    pub max_iterations: usize,
    pub exec: Execution,
}

impl DiscountedOptions {
    pub fn new(tol: f64) -> Self {
        DiscountedOptions {
            tol,
            max_iterations: MAX_ITERATIONS,
            exec: Execution::default(),
        }
    }
}

fn discount_of(model: &ModelSpec) -> Result<f64> {
    match model.horizon() {
        Horizon::Discounted(b) => Ok(b),
        Horizon::Finite(_) => Err(Error::Unsupported(
            "discounted solve on a finite-horizon model".into(),
        )),
    }
}

pub fn solve_discounted(
    model: &ModelSpec,
    lifted: &LiftedMdp,
    tol: f64,
) -> Result<DiscountedSolution> {
    solve_discounted_with(model, lifted, DiscountedOptions::new(tol))
}

pub fn solve_discounted_with(
    model: &ModelSpec,
    lifted: &LiftedMdp,
    options: DiscountedOptions,
) -> Result<DiscountedSolution> {
    let beta = discount_of(model)?;
    if !(options.tol > 0.0) {
        return Err(Error::invalid("tol", "tolerance must be positive"));
    }
    if !model.is_time_homogeneous() {
        return Err(Error::Unsupported(
            "value iteration needs a time-homogeneous model".into(),
        ));
    }
    let tables = lifted.stage(0)?;
    // ‖V_{k+1} − V_k‖ < tol (1−β) / (2β) gives ‖V_{k+1} − V*‖ < tol / 2
    let threshold = options.tol * (1.0 - beta) / (2.0 * beta);
    let mut v = vec![0.0; lifted.num_states()];
    let mut norms = Vec::new();
    for iteration in 1..=options.max_iterations {
        let (next, argmin) = bellman_backup(tables, &v, beta, options.exec);
        let delta = sup_distance(&next, &v);
        norms.push(delta);
        v = next;
        if delta < threshold {
            // greedy policy from the final values
            let (_, greedy) = bellman_backup(tables, &v, beta, options.exec);
            let _ = argmin;
            return Ok(DiscountedSolution {
                policy: Policy::stationary(greedy),
                values: ValueFunction { stages: vec![v] },
                iterations: iteration,
                update_norms: norms,
                value_error_bound: beta / (1.0 - beta) * delta,
            });
        }
    }
    Err(Error::Numeric(format!(
        "value iteration did not reach tolerance {} in {} iterations",
        options.tol, options.max_iterations
    )))
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Exact value of `policy`: backward recursion for finite horizons, fixed-point
/// iteration to [`DEFAULT_EVAL_TOL`] for discounted models.
pub fn evaluate_policy(
    model: &ModelSpec,
    lifted: &LiftedMdp,
    policy: &Policy,
) -> Result<ValueFunction> {
    evaluate_policy_with(
        model,
        lifted,
        policy,
        DEFAULT_EVAL_TOL,
        Execution::default(),
    )
}

pub fn evaluate_policy_with(
    model: &ModelSpec,
    lifted: &LiftedMdp,
    policy: &Policy,
    tol: f64,
    exec: Execution,
) -> Result<ValueFunction> {
    match model.horizon() {
        Horizon::Finite(horizon) => {
            policy.check(lifted, Some(horizon))?;
            let mut values = vec![vec![0.0; lifted.num_states()]; horizon + 1];
            for t in (0..horizon).rev() {
                let maps = &policy.stages[if policy.is_stationary() { 0 } else { t }];
                values[t] = policy_backup(lifted.stage(t)?, &values[t + 1], 1.0, maps, exec);
            }
            Ok(ValueFunction { stages: values })
        }
        Horizon::Discounted(beta) => {
            policy.check(lifted, None)?;
            if !policy.is_stationary() {
                return Err(Error::DimensionMismatch(
                    "discounted evaluation needs a stationary policy".into(),
                ));
            }
            if !(tol > 0.0) {
                return Err(Error::invalid("tol", "tolerance must be positive"));
            }
            let tables = lifted.stage(0)?;
            let threshold = tol * (1.0 - beta) / beta;
            let mut v = vec![0.0; lifted.num_states()];
            for _ in 0..MAX_ITERATIONS {
                let next = policy_backup(tables, &v, beta, &policy.stages[0], exec);
                let delta = sup_distance(&next, &v);
                v = next;
                if delta < threshold {
                    return Ok(ValueFunction { stages: vec![v] });
                }
            }
            Err(Error::Numeric("policy evaluation did not converge".into()))
        }
    }
}

/// `P(Z_1 = z)` over ranks: the multinomial induced by i.i.d. initial states.
pub fn initial_distribution(model: &ModelSpec, space: &MeanFieldSpace) -> Vec<f64> {
    multinomial_pmf(model.n(), model.init_dist(), space.fields())
}

/// `J = Σ_z P(Z_1 = z) V(z)`.
pub fn expected_value(model: &ModelSpec, space: &MeanFieldSpace, initial_values: &[f64]) -> f64 {
    initial_distribution(model, space)
        .iter()
        .zip(initial_values)
        .map(|(p, v)| p * v)
        .sum()
}

/// `max_z |min_γ Q(z, γ) − V(z)|` plus the gap between the policy's action
/// and the minimum, for one stage.
pub fn bellman_residual(
    tables: &StageTables,
    values: &[f64],
    next: &[f64],
    discount: f64,
    maps: &[usize],
) -> f64 {
    let mut worst: f64 = 0.0;
    for z in 0..tables.num_states() {
        let mut best = f64::INFINITY;
        for g in 0..tables.num_maps() {
            best = best.min(tables.cost(z, g) + discount * tables.expect(z, g, next));
        }
        let chosen = tables.cost(z, maps[z]) + discount * tables.expect(z, maps[z], next);
        worst = worst.max((best - values[z]).abs()).max(chosen - best);
    }
    worst
}

/// Per-controller law `g_t(z, x) = ψ_t(z)(x)` as a dense table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControllerStrategy {
    k: usize,
    /// `[stage][rank][x]`
    actions: Vec<Vec<Vec<usize>>>,
}

impl ControllerStrategy {
    pub fn from_policy(policy: &Policy, maps: &MapSpace) -> Result<Self> {
        let actions = policy
            .stages
            .iter()
            .map(|stage| {
                stage
                    .iter()
                    .map(|&g| Ok(maps.get(g)?.assignment().to_vec()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ControllerStrategy {
            k: maps.k(),
            actions,
        })
    }

    pub fn new(actions: Vec<Vec<Vec<usize>>>, k: usize) -> Result<Self> {
        if actions.is_empty() || actions.iter().flatten().any(|row| row.len() != k) {
            return Err(Error::StrategyGap(
                "controller table is not total over local states".into(),
            ));
        }
        Ok(ControllerStrategy { k, actions })
    }

    pub fn action(&self, stage: usize, z: usize, x: usize) -> usize {
        let s = if self.actions.len() == 1 { 0 } else { stage };
        self.actions[s][z][x]
    }

    pub fn stage_count(&self) -> usize {
        self.actions.len()
    }

    pub fn num_states(&self) -> usize {
        self.actions[0].len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Coordination map the table prescribes at `(stage, rank)`.
    pub fn map_at(&self, stage: usize, z: usize, num_actions: usize) -> Result<CoordinationMap> {
        let s = if self.actions.len() == 1 { 0 } else { stage };
        let row = self
            .actions
            .get(s)
            .and_then(|st| st.get(z))
            .ok_or_else(|| Error::StrategyGap(format!("stage {stage}, mean-field rank {z}")))?;
        CoordinationMap::new(row.clone(), num_actions)
    }

    pub fn to_policy(&self, num_actions: usize) -> Result<Policy> {
        let stages = self
            .actions
            .iter()
            .map(|stage| {
                stage
                    .iter()
                    .map(|row| {
                        Ok(CoordinationMap::new(row.clone(), num_actions)?.index(num_actions))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Policy::new(stages)
    }
}

/// Writes `stage,z_rank,count_*,map_index,action_*,value`.
pub fn write_policy_csv<W: Write>(
    space: &MeanFieldSpace,
    maps: &MapSpace,
    policy: &Policy,
    values: &ValueFunction,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = space.k();
    let mut header = vec!["stage".to_string(), "z_rank".to_string()];
    header.extend((0..k).map(|x| format!("count_{x}")));
    header.push("map_index".into());
    header.extend((0..k).map(|x| format!("action_{x}")));
    header.push("value".into());
    w.write_record(&header)?;
    for (t, stage) in policy.stages.iter().enumerate() {
        for (z, &g) in stage.iter().enumerate() {
            let mut rec = vec![t.to_string(), z.to_string()];
            rec.extend(space.fields()[z].counts().iter().map(|c| c.to_string()));
            rec.push(g.to_string());
            rec.extend(maps.get(g)?.assignment().iter().map(|u| u.to_string()));
            rec.push(values.stages[t][z].to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the `stage,z_rank,...,map_index,...` layout written by [`write_policy_csv`].
pub fn read_policy_csv<R: std::io::Read>(input: R, num_states: usize) -> Result<Policy> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid("policy", format!("missing column `{name}`")))
    };
    let (c_stage, c_rank, c_map) = (col("stage")?, col("z_rank")?, col("map_index")?);
    let mut stages: Vec<Vec<Option<usize>>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |c: usize| {
            rec[c]
                .parse::<usize>()
                .map_err(|e| Error::invalid(format!("policy row {}", line + 1), e))
        };
        let (t, z, g) = (parse(c_stage)?, parse(c_rank)?, parse(c_map)?);
        if z >= num_states {
            return Err(Error::IndexOutOfRange {
                index: z,
                len: num_states,
            });
        }
        if stages.len() <= t {
            stages.resize(t + 1, vec![None; num_states]);
        }
        stages[t][z] = Some(g);
    }
    let stages = stages
        .into_iter()
        .enumerate()
        .map(|(t, s)| {
            s.into_iter()
                .enumerate()
                .map(|(z, g)| g.ok_or_else(|| Error::StrategyGap(format!("stage {t}, rank {z}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Policy::new(stages)
}
