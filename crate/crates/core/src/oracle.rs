//! Brute-force references over the joint space `X^n`.
//!
//! Everything here works from definitions: joint states are enumerated,
//! noise is made explicit, strategies are scored on the joint chain. None of
//! it reuses the lifted kernel, the lifted cost or the solvers, so agreement
//! with them is evidence rather than tautology. Size guards keep it honest
//! about scale.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mdp::Policy;
use crate::model::{
    mean_field_of, CoordinationMap, Horizon, MapSpace, MeanField, MeanFieldSpace, ModelSpec,
    StochasticMatrix,
};

/// Largest population the brute kernel accepts.
pub const MAX_BRUTE_N: usize = 5;

/// Cap on joint states enumerated by any oracle.
pub const MAX_JOINT_STATES: u128 = 1 << 20;

/// Cap on candidate strategies in exhaustive search.
pub const MAX_CANDIDATES: u128 = 10_000_000;

/// Dynamics written as `y = f(x, u, w)` with `w ~ P_W` on a finite alphabet.
///
/// Built from the stochastic matrices by taking every cumulative breakpoint
/// of every row as a cut of `[0, 1)`. Each resulting interval is one noise
/// symbol, with probability its length, and `f(x, u, w)` is the state whose
/// CDF step covers that interval.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitNoise {
    k: usize,
    probs: Vec<f64>,
    /// `[(u * k + x) * |W| + w]`
    plant: Vec<usize>,
}

impl ExplicitNoise {
    pub fn from_matrices(matrices: &[StochasticMatrix]) -> Self {
        let k = matrices.first().map_or(0, StochasticMatrix::dim);
        let mut cuts = vec![0.0, 1.0];
        for m in matrices {
            for x in 0..k {
                let mut c = 0.0;
                for &p in &m.row(x)[..k - 1] {
                    c += p;
                    if c > 0.0 && c < 1.0 {
                        cuts.push(c);
                    }
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let probs: Vec<f64> = cuts.windows(2).map(|w| w[1] - w[0]).collect();
        let mut plant = Vec::with_capacity(matrices.len() * k * probs.len());
        for m in matrices {
            for x in 0..k {
                let row = m.row(x);
                for w in cuts.windows(2) {
                    let left = w[0];
                    let mut c = 0.0;
                    let mut y = k - 1;
                    for (j, &p) in row.iter().enumerate() {
                        c += p;
                        if p > 0.0 && c > left {
                            y = j;
                            break;
                        }
                    }
                    plant.push(y);
                }
            }
        }
        ExplicitNoise { k, probs, plant }
    }

    pub fn alphabet(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, w: usize) -> f64 {
        self.probs[w]
    }

    pub fn next(&self, x: usize, u: usize, w: usize) -> usize {
        self.plant[(u * self.k + x) * self.probs.len() + w]
    }
}

fn power(base: usize, exp: usize) -> u128 {
    (base as u128).saturating_pow(exp as u32)
}

fn guard(what: &'static str, required: u128, budget: u128) -> Result<()> {
    if required > budget {
        return Err(Error::BudgetExceeded {
            what,
            required,
            budget,
        });
    }
    Ok(())
}

/// Joint state number `j` in base `k`, subsystem 0 least significant.
fn decode(mut j: usize, n: usize, k: usize, out: &mut [usize]) {
    for slot in out.iter_mut().take(n) {
        *slot = j % k;
        j /= k;
    }
}

fn encode(x: &[usize], k: usize) -> usize {
    x.iter().rev().fold(0, |acc, &v| acc * k + v)
}

/// All joint states with empirical distribution `z`.
pub fn class_members(z: &MeanField) -> Result<Vec<Vec<usize>>> {
    let (n, k) = (z.n() as usize, z.k());
    guard("joint states", power(k, n), MAX_JOINT_STATES)?;
    let mut out = Vec::new();
    let mut x = vec![0; n];
    for j in 0..k.pow(n as u32) {
        decode(j, n, k, &mut x);
        if mean_field_of(&x, k)? == *z {
            out.push(x.clone());
        }
    }
    Ok(out)
}

/// `P(z' | z, γ)` as `(1/|H(z)|) Σ_{x ∈ H(z)} Σ_w Π_i P_W(w^i) 1(mean_field_of(f(x, γ(x), w)) = z')`.
pub fn brute_kernel(
    model: &ModelSpec,
    z: &MeanField,
    map: &CoordinationMap,
    stage: usize,
) -> Result<Vec<f64>> {
    let (n, k) = (model.n(), model.k());
    if n > MAX_BRUTE_N {
        return Err(Error::BudgetExceeded {
            what: "brute kernel population",
            required: n as u128,
            budget: MAX_BRUTE_N as u128,
        });
    }
    let noise = ExplicitNoise::from_matrices(&model.dynamics().matrices(z, stage));
    let alpha = noise.alphabet();
    guard("noise outcomes", power(alpha, n), MAX_JOINT_STATES)?;
    let members = class_members(z)?;
    let space = MeanFieldSpace::new(n, k);
    let mut row = vec![0.0; space.len()];
    let mut w = vec![0; n];
    let mut y = vec![0; n];
    for x in &members {
        for j in 0..alpha.pow(n as u32) {
            decode(j, n, alpha, &mut w);
            let mut p = 1.0;
            for i in 0..n {
                p *= noise.prob(w[i]);
                y[i] = noise.next(x[i], map.action(x[i]), w[i]);
            }
            row[space.rank(&mean_field_of(&y, k)?)?] += p;
        }
    }
    let size = members.len() as f64;
    Ok(row.into_iter().map(|p| p / size).collect())
}

/// `ĥℓ_t(z, γ)` as the plain average of the joint cost over `H(z)`.
pub fn brute_cost(
    model: &ModelSpec,
    z: &MeanField,
    map: &CoordinationMap,
    stage: usize,
) -> Result<f64> {
    let members = class_members(z)?;
    let mut total = 0.0;
    for x in &members {
        let u: Vec<usize> = x.iter().map(|&xi| map.action(xi)).collect();
        total += model
            .cost()
            .joint_cost(stage, x, &u, model.k(), Some(map))?;
    }
    Ok(total / members.len() as f64)
}

fn finite_horizon(model: &ModelSpec) -> Result<usize> {
    match model.horizon() {
        Horizon::Finite(t) => Ok(t),
        Horizon::Discounted(_) => Err(Error::Unsupported("oracles need a finite horizon".into())),
    }
}

/// Expected total cost of a possibly asymmetric strategy
/// `u^i_t = g(t, i, z_t, x^i_t)`, by propagating the law of the joint state.
pub fn joint_strategy_value<G>(model: &ModelSpec, g: G) -> Result<f64>
where
    G: Fn(usize, usize, &MeanField, usize) -> usize,
{
    let horizon = finite_horizon(model)?;
    let (n, k) = (model.n(), model.k());
    guard("joint states", power(k, n), MAX_JOINT_STATES)?;
    let size = k.pow(n as u32);
    let mut law = vec![0.0; size];
    let mut x = vec![0; n];
    for (j, p) in law.iter_mut().enumerate() {
        decode(j, n, k, &mut x);
        *p = x.iter().map(|&xi| model.init_dist()[xi]).product();
    }
    let mut total = 0.0;
    let mut y = vec![0; n];
    for t in 0..horizon {
        let mut next = vec![0.0; size];
        for (j, &p) in law.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            decode(j, n, k, &mut x);
            let z = mean_field_of(&x, k)?;
            let u: Vec<usize> = (0..n).map(|i| g(t, i, &z, x[i])).collect();
            if u.iter().any(|&ui| ui >= model.num_actions()) {
                return Err(Error::IndexOutOfRange {
                    index: *u.iter().max().unwrap_or(&0),
                    len: model.num_actions(),
                });
            }
            total += p * model.cost().joint_cost(t, &x, &u, k, None)?;
            let mats = model.dynamics().matrices(&z, t);
            for (jy, q) in next.iter_mut().enumerate() {
                decode(jy, n, k, &mut y);
                let mut pr = p;
                for i in 0..n {
                    pr *= mats[u[i]].get(x[i], y[i]);
                    if pr == 0.0 {
                        break;
                    }
                }
                *q += pr;
            }
        }
        law = next;
    }
    Ok(total)
}

/// Joint-chain value of a symmetric Markov policy over mean-fields.
pub fn joint_policy_value(model: &ModelSpec, policy: &Policy) -> Result<f64> {
    let space = model.mean_field_space();
    let maps = model.map_space();
    joint_strategy_value(model, |t, _, z, x| {
        let rank = space.rank(z).expect("z is a mean-field of the model");
        maps.maps()[policy.map_at(t, rank)].action(x)
    })
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub policy: Policy,
    pub value: f64,
    pub candidates: u128,
}

/// Minimum over every Markov symmetric policy `ψ: stage × M_n -> γ`,
/// each scored on the joint chain. Ties keep the first candidate.
pub fn exhaustive_symmetric_search(model: &ModelSpec) -> Result<SearchResult> {
    let horizon = finite_horizon(model)?;
    let space = model.mean_field_space();
    let maps = MapSpace::new(model.k(), model.num_actions());
    let slots = space.len() * horizon;
    let candidates = power(maps.len(), slots);
    guard("symmetric strategies", candidates, MAX_CANDIDATES)?;
    let mut digits = vec![0usize; slots];
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..candidates {
        let policy = to_policy(&digits, space.len());
        let v = joint_policy_value(model, &policy)?;
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, digits.clone()));
        }
        for d in digits.iter_mut() {
            *d += 1;
            if *d < maps.len() {
                break;
            }
            *d = 0;
        }
    }
    let (value, digits) = best.expect("at least one candidate");
    Ok(SearchResult {
        policy: to_policy(&digits, space.len()),
        value,
        candidates,
    })
}

fn to_policy(digits: &[usize], states: usize) -> Policy {
    Policy::new(digits.chunks(states).map(<[usize]>::to_vec).collect()).expect("rectangular")
}

/// Best fixed sequence of maps `γ_1, ..., γ_T` applied regardless of `z`.
pub fn open_loop_search(model: &ModelSpec) -> Result<(Vec<usize>, f64)> {
    let horizon = finite_horizon(model)?;
    let maps = MapSpace::new(model.k(), model.num_actions());
    let candidates = power(maps.len(), horizon);
    guard("open-loop sequences", candidates, MAX_CANDIDATES)?;
    let mut seq = vec![0usize; horizon];
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..candidates {
        let v = joint_strategy_value(model, |t, _, _, x| maps.maps()[seq[t]].action(x))?;
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, seq.clone()));
        }
        for d in seq.iter_mut() {
            *d += 1;
            if *d < maps.len() {
                break;
            }
            *d = 0;
        }
    }
    let (v, s) = best.expect("at least one candidate");
    Ok((s, v))
}

/// Law of the joint state at the end of `history`, conditioned on every
/// observed mean-field along it. `history[s] = (z_s, map index γ_s)`; the
/// last map is not applied. Returns `None` when the history has probability 0.
pub fn conditional_joint_law(
    model: &ModelSpec,
    history: &[(MeanField, usize)],
) -> Result<Option<BTreeMap<Vec<usize>, f64>>> {
    let (n, k) = (model.n(), model.k());
    guard("joint states", power(k, n), MAX_JOINT_STATES)?;
    let maps = model.map_space();
    let size = k.pow(n as u32);
    let mut x = vec![0; n];
    let mut y = vec![0; n];
    let mut law: Vec<f64> = (0..size)
        .map(|j| {
            decode(j, n, k, &mut x);
            x.iter().map(|&xi| model.init_dist()[xi]).product()
        })
        .collect();
    for (t, (z, g)) in history.iter().enumerate() {
        for (j, p) in law.iter_mut().enumerate() {
            decode(j, n, k, &mut x);
            if mean_field_of(&x, k)? != *z {
                *p = 0.0;
            }
        }
        let mass: f64 = law.iter().sum();
        if mass == 0.0 {
            return Ok(None);
        }
        law.iter_mut().for_each(|p| *p /= mass);
        if t + 1 == history.len() {
            break;
        }
        let map = maps.get(*g)?;
        let mats = model.dynamics().matrices(z, t);
        let mut next = vec![0.0; size];
        for (j, &p) in law.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            decode(j, n, k, &mut x);
            for (jy, q) in next.iter_mut().enumerate() {
                decode(jy, n, k, &mut y);
                *q += (0..n).fold(p, |acc, i| acc * mats[map.action(x[i])].get(x[i], y[i]));
            }
        }
        law = next;
    }
    let mut out = BTreeMap::new();
    for (j, &p) in law.iter().enumerate() {
        if p > 0.0 {
            decode(j, n, k, &mut x);
            out.insert(x.clone(), p);
        }
    }
    Ok(Some(out))
}

/// `P(Z_{t+1} = · | z_{1:t}, γ_{1:t})` on the joint chain; the last entry
/// of `history` carries `(z_t, γ_t)`.
pub fn conditional_kernel(
    model: &ModelSpec,
    history: &[(MeanField, usize)],
) -> Result<Option<Vec<f64>>> {
    let Some(law) = conditional_joint_law(model, history)? else {
        return Ok(None);
    };
    let (n, k) = (model.n(), model.k());
    let (z, g) = history.last().expect("non-empty history");
    let map = model.map_space().get(*g)?.clone();
    let mats = model.dynamics().matrices(z, history.len() - 1);
    let space = MeanFieldSpace::new(n, k);
    let mut row = vec![0.0; space.len()];
    let mut y = vec![0; n];
    for (x, p) in &law {
        for jy in 0..k.pow(n as u32) {
            decode(jy, n, k, &mut y);
            let pr = (0..n).fold(*p, |acc, i| acc * mats[map.action(x[i])].get(x[i], y[i]));
            if pr > 0.0 {
                row[space.rank(&mean_field_of(&y, k)?)?] += pr;
            }
        }
    }
    Ok(Some(row))
}

/// Index of `x` in the joint-state numbering used by the oracles.
pub fn joint_index(x: &[usize], k: usize) -> usize {
    encode(x, k)
}

/// Seeded generators for randomised model and cost families.
pub mod random {
    use std::sync::Arc;

    use rand::rngs::ChaCha8Rng;
    use rand::{RngExt, SeedableRng};

    use crate::lifted::{CostSpec, GeneralCost};
    use crate::model::{Dynamics, Horizon, ModelSpec, StochasticMatrix};

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// A random distribution on `k` points. With `quantum = Some(q)` every
    /// entry is a multiple of `1/q`, and some may be zero.
    pub fn distribution(rng: &mut ChaCha8Rng, k: usize, quantum: Option<u32>) -> Vec<f64> {
        match quantum {
            Some(q) => {
                let mut units = vec![0u32; k];
                for _ in 0..q {
                    units[rng.random_range(0..k)] += 1;
                }
                units.iter().map(|&c| f64::from(c) / f64::from(q)).collect()
            }
            None => {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let mut p: Vec<f64> = raw.iter().map(|r| r / s).collect();
                let head: f64 = p[..k - 1].iter().sum();
                p[k - 1] = 1.0 - head;
                p
            }
        }
    }

    pub fn matrix(rng: &mut ChaCha8Rng, k: usize, quantum: Option<u32>) -> StochasticMatrix {
        let rows: Vec<Vec<f64>> = (0..k).map(|_| distribution(rng, k, quantum)).collect();
        StochasticMatrix::from_rows(&rows).expect("generated rows are stochastic")
    }

    /// Homogeneous dynamics, zero cost, one stage.
    pub fn model(
        rng: &mut ChaCha8Rng,
        n: usize,
        k: usize,
        num_actions: usize,
        quantum: Option<u32>,
    ) -> ModelSpec {
        let mats = (0..num_actions).map(|_| matrix(rng, k, quantum)).collect();
        let init = distribution(rng, k, None);
        ModelSpec::new(
            n,
            k,
            num_actions,
            Dynamics::Homogeneous(mats),
            CostSpec::zero(),
            Horizon::Finite(1),
            init,
        )
        .expect("generated model is valid")
    }

    /// A cost table over every `(joint state, joint action)` pair, with no
    /// symmetry across subsystems.
    pub fn general_cost(rng: &mut ChaCha8Rng, n: usize, k: usize, num_actions: usize) -> CostSpec {
        let size = (k * num_actions).pow(n as u32);
        let table: Vec<f64> = (0..size).map(|_| rng.random_range(-1.0..1.0)).collect();
        CostSpec::General(GeneralCost::new(Arc::new(
            move |x: &[usize], u: &[usize]| {
                let idx = x.iter().zip(u).rev().fold(0, |acc, (&xi, &ui)| {
                    acc * k * num_actions + xi * num_actions + ui
                });
                table[idx]
            },
        )))
    }
}

/// Outcome of one oracle comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Oracle comparisons that fit the size of `model`; larger models skip the
/// checks they cannot afford.
pub fn verify_model(model: &ModelSpec) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let space = model.mean_field_space();
    let maps = model.map_space();
    let stages = match model.horizon() {
        Horizon::Finite(t) => t,
        Horizon::Discounted(_) => 1,
    };
    let joint_ok = power(model.k(), model.n()) <= MAX_JOINT_STATES;
    if model.n() <= MAX_BRUTE_N && joint_ok {
        let mut worst: f64 = 0.0;
        let mut worst_cost: f64 = 0.0;
        for t in 0..stages.min(model.stage_count().max(1)) {
            for z in space.fields() {
                for g in maps.maps() {
                    let fast = crate::lifted::lift_kernel_row(model, z, g, t)?;
                    let slow = brute_kernel(model, z, g, t)?;
                    for (a, b) in fast.iter().zip(&slow) {
                        worst = worst.max((a - b).abs());
                    }
                    let c = crate::lifted::lift_cost(model, z, g, t)?;
                    if c.samples.is_none() {
                        worst_cost = worst_cost.max((c.value - brute_cost(model, z, g, t)?).abs());
                    }
                }
            }
        }
        checks.push(Check {
            name: "kernel".into(),
            passed: worst <= 1e-12,
            detail: format!("max |lifted − brute| = {worst:e}"),
        });
        checks.push(Check {
            name: "cost".into(),
            passed: worst_cost <= 1e-12,
            detail: format!("max |lifted − brute| = {worst_cost:e}"),
        });
    }
    if let Horizon::Finite(t) = model.horizon() {
        let candidates = power(maps.len(), space.len() * t);
        if joint_ok && candidates <= 100_000 {
            let lifted = crate::lifted::build_lifted_mdp(model)?;
            let sol = crate::mdp::solve_finite_horizon(model, &lifted)?;
            let dp = crate::mdp::expected_value(model, &space, sol.values.initial());
            let search = exhaustive_symmetric_search(model)?;
            let gap = (dp - search.value).abs();
            checks.push(Check {
                name: "dp-vs-exhaustive".into(),
                passed: gap <= 1e-12,
                detail: format!(
                    "dp {dp}, exhaustive {}, {} candidates",
                    search.value, search.candidates
                ),
            });
        }
        if space.len() <= 64 && crate::pomdp::node_bound(space.len(), maps.len(), t) <= 1_000_000 {
            let lifted = crate::lifted::build_lifted_mdp(model)?;
            let sol = crate::mdp::solve_finite_horizon(model, &lifted)?;
            let dp = crate::mdp::expected_value(model, &space, sol.values.initial());
            let channel = crate::pomdp::ObservationChannel::noiseless(space.len());
            let pomdp = crate::pomdp::solve_pomdp_finite(model, &lifted, &channel, t)?;
            let gap = (dp - pomdp.value).abs();
            checks.push(Check {
                name: "pomdp-noiseless".into(),
                passed: gap <= 1e-10,
                detail: format!("mdp {dp}, pomdp {}", pomdp.value),
            });
        }
    }
    Ok(checks)
}
