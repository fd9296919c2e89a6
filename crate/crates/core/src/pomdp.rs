//! Partially observed mean-field sharing.
//!
//! Controllers see a noisy reading `y ~ L[· | z]` of the mean-field instead
//! of `z` itself. The coordinator then carries a belief over `M_n`, and the
//! finite-horizon problem is solved exactly on the tree of beliefs reachable
//! from the root. The root belief is the multinomial prior filtered by the
//! first observation, so there is one root per positive-probability `y_1`.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lifted::{LiftedMdp, StageTables};
use crate::mdp::initial_distribution;
use crate::model::{Horizon, MapSpace, MeanFieldSpace, ModelSpec};

/// Tolerance on belief normalisation.
pub const BELIEF_TOL: f64 = 1e-10;

const LIKELIHOOD_TOL: f64 = 1e-12;

/// Default cap on belief-tree nodes visited by the solver.
pub const DEFAULT_NODE_BUDGET: u128 = 10_000_000;

/// Dense likelihood `L[y | z]` over `Y × M_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationChannel {
    num_obs: usize,
    num_states: usize,
    /// `[y * num_states + z]`
    likelihood: Vec<f64>,
}

impl ObservationChannel {
    /// `Y = M_n`, `y = z`.
    pub fn noiseless(num_states: usize) -> Self {
        let mut likelihood = vec![0.0; num_states * num_states];
        for z in 0..num_states {
            likelihood[z * num_states + z] = 1.0;
        }
        ObservationChannel {
            num_obs: num_states,
            num_states,
            likelihood,
        }
    }

    /// A single symbol, emitted with probability one whatever `z` is.
    pub fn uninformative(num_states: usize) -> Self {
        ObservationChannel {
            num_obs: 1,
            num_states,
            likelihood: vec![1.0; num_states],
        }
    }

    /// `table[z][y] = L[y | z]`; each row must be a distribution.
    pub fn from_table(table: &[Vec<f64>]) -> Result<Self> {
        let num_states = table.len();
        let num_obs = table.first().map_or(0, Vec::len);
        if num_states == 0 || num_obs == 0 {
            return Err(Error::invalid(
                "observation.table",
                "empty likelihood table",
            ));
        }
        let mut likelihood = vec![0.0; num_obs * num_states];
        for (z, row) in table.iter().enumerate() {
            let path = format!("observation.table[{z}]");
            if row.len() != num_obs {
                return Err(Error::invalid(
                    path,
                    format!("expected {num_obs} entries, found {}", row.len()),
                ));
            }
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::invalid(
                    path,
                    "likelihoods must be finite and nonnegative",
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > LIKELIHOOD_TOL {
                return Err(Error::invalid(path, format!("likelihoods sum to {sum}")));
            }
            for (y, &p) in row.iter().enumerate() {
                likelihood[y * num_states + z] = p;
            }
        }
        Ok(ObservationChannel {
            num_obs,
            num_states,
            likelihood,
        })
    }

    /// Marginalises `y = h(z, ν)` over the noise PMF `P_N`.
    pub fn from_function<H>(num_states: usize, num_obs: usize, h: H, noise: &[f64]) -> Result<Self>
    where
        H: Fn(usize, usize) -> usize,
    {
        crate::model::check_distribution(noise, "observation.noise")?;
        let mut table = vec![vec![0.0; num_obs]; num_states];
        for (z, row) in table.iter_mut().enumerate() {
            for (nu, &p) in noise.iter().enumerate() {
                let y = h(z, nu);
                if y >= num_obs {
                    return Err(Error::IndexOutOfRange {
                        index: y,
                        len: num_obs,
                    });
                }
                row[y] += p;
            }
        }
        Self::from_table(&table)
    }

    /// Reads the count of local state `state` with an additive offset drawn
    /// from `offsets` (centred: entry `r` is offset `r - offsets.len() / 2`),
    /// clamped to `[0, n]`. `Y = {0, ..., n}`.
    pub fn count_noise(space: &MeanFieldSpace, state: usize, offsets: &[f64]) -> Result<Self> {
        if state >= space.k() {
            return Err(Error::invalid(
                "observation.state",
                "local state out of range",
            ));
        }
        let n = space.n() as i64;
        let centre = (offsets.len() / 2) as i64;
        Self::from_function(
            space.len(),
            space.n() + 1,
            |z, nu| {
                let c = i64::from(space.fields()[z].count(state));
                (c + nu as i64 - centre).clamp(0, n) as usize
            },
            offsets,
        )
    }

    pub fn num_obs(&self) -> usize {
        self.num_obs
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn likelihood(&self, y: usize, z: usize) -> f64 {
        self.likelihood[y * self.num_states + z]
    }

    /// `L[y | ·]` over ranks.
    pub fn column(&self, y: usize) -> &[f64] {
        &self.likelihood[y * self.num_states..(y + 1) * self.num_states]
    }

    /// `table[z][y]`, the layout accepted by [`from_table`](Self::from_table).
    pub fn table(&self) -> Vec<Vec<f64>> {
        (0..self.num_states)
            .map(|z| (0..self.num_obs).map(|y| self.likelihood(y, z)).collect())
            .collect()
    }
}

/// A distribution over `M_n` in rank order.
#[derive(Clone, Debug, PartialEq)]
pub struct Belief {
    probs: Vec<f64>,
}

impl Belief {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Numeric("belief has a negative or NaN entry".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > BELIEF_TOL {
            return Err(Error::Numeric(format!("belief sums to {sum}")));
        }
        Ok(Belief { probs })
    }

    pub fn dirac(num_states: usize, z: usize) -> Self {
        let mut probs = vec![0.0; num_states];
        probs[z] = 1.0;
        Belief { probs }
    }

    pub fn uniform(num_states: usize) -> Self {
        Belief {
            probs: vec![1.0 / num_states as f64; num_states],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `Σ_z P(z' | z, γ) π(z)`, accumulated in rank order of `z`.
pub fn predict(belief: &Belief, map: usize, tables: &StageTables) -> Vec<f64> {
    let mut out = vec![0.0; tables.num_states()];
    for (z, &p) in belief.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for &(j, q) in tables.row(z, map) {
            out[j as usize] += p * q;
        }
    }
    out
}

/// `P(y | π, γ)` for every symbol.
pub fn observation_probs(prediction: &[f64], channel: &ObservationChannel) -> Vec<f64> {
    (0..channel.num_obs)
        .map(|y| dot(channel.column(y), prediction))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn filter(prior: &[f64], y: usize, channel: &ObservationChannel) -> Result<(Belief, f64)> {
    if y >= channel.num_obs {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: channel.num_obs,
        });
    }
    let mut post: Vec<f64> = channel
        .column(y)
        .iter()
        .zip(prior)
        .map(|(l, p)| l * p)
        .collect();
    let norm: f64 = post.iter().sum();
    if !(norm > 0.0) {
        return Err(Error::ImpossibleObservation { observation: y });
    }
    for p in &mut post {
        *p /= norm;
    }
    Ok((Belief { probs: post }, norm))
}

/// `φ(π, γ, y)`.
pub fn belief_update(
    belief: &Belief,
    map: usize,
    y: usize,
    tables: &StageTables,
    channel: &ObservationChannel,
) -> Result<Belief> {
    check_dims(belief, tables, channel)?;
    filter(&predict(belief, map, tables), y, channel).map(|(b, _)| b)
}

fn check_dims(belief: &Belief, tables: &StageTables, channel: &ObservationChannel) -> Result<()> {
    if belief.len() != tables.num_states() || channel.num_states != tables.num_states() {
        return Err(Error::DimensionMismatch(format!(
            "belief over {}, channel over {}, model has {} mean-fields",
            belief.len(),
            channel.num_states,
            tables.num_states()
        )));
    }
    Ok(())
}

/// `Σ_z π(z) ĥℓ(z, γ)`.
pub fn lift_belief_cost(belief: &Belief, map: usize, tables: &StageTables) -> f64 {
    belief
        .probs
        .iter()
        .enumerate()
        .map(|(z, &p)| p * tables.cost(z, map))
        .sum()
}

/// The coordinator's posterior at `t = 1`, one entry per `y_1` with
/// positive probability: `(y_1, P(y_1), belief)`.
pub fn root_beliefs(
    model: &ModelSpec,
    space: &MeanFieldSpace,
    channel: &ObservationChannel,
) -> Result<Vec<(usize, f64, Belief)>> {
    if channel.num_states != space.len() {
        return Err(Error::DimensionMismatch(format!(
            "channel over {} mean-fields, model has {}",
            channel.num_states,
            space.len()
        )));
    }
    let prior = initial_distribution(model, space);
    let mut roots = Vec::new();
    for y in 0..channel.num_obs {
        match filter(&prior, y, channel) {
            Ok((b, p)) => roots.push((y, p, b)),
            Err(Error::ImpossibleObservation { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(roots)
}

#[derive(Clone, Copy, Debug)]
pub struct PomdpOptions {
    pub node_budget: u128,
    pub exec: Execution,
}

impl Default for PomdpOptions {
    fn default() -> Self {
        PomdpOptions {
            node_budget: DEFAULT_NODE_BUDGET,
            exec: Execution::default(),
        }
    }
}

/// One decision point of the optimal strategy tree.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefNode {
    pub belief: Belief,
    pub map: usize,
    /// `V_t(π)` at this node.
    pub value: f64,
    /// Successors under `map`, keyed by the next observation, ascending.
    pub children: Vec<(usize, BeliefNode)>,
}

impl BeliefNode {
    pub fn child(&self, y: usize) -> Option<&BeliefNode> {
        self.children
            .binary_search_by_key(&y, |(o, _)| *o)
            .ok()
            .map(|i| &self.children[i].1)
    }
}

#[derive(Clone, Debug)]
pub struct PomdpSolution {
    /// `Σ_{y_1} P(y_1) V_1(π_1^{y_1})`.
    pub value: f64,
    pub horizon: usize,
    /// `(y_1, P(y_1), subtree)`.
    pub roots: Vec<(usize, f64, BeliefNode)>,
}

impl PomdpSolution {
    /// Node reached by the observation history `y_1, ..., y_t`.
    pub fn node(&self, history: &[usize]) -> Option<&BeliefNode> {
        let (&first, rest) = history.split_first()?;
        let i = self.roots.binary_search_by_key(&first, |r| r.0).ok()?;
        rest.iter()
            .try_fold(&self.roots[i].2, |node, &y| node.child(y))
    }

    /// `g*(π, x) = ψ*(π)(x)` along the history.
    pub fn action(&self, history: &[usize], x: usize, maps: &MapSpace) -> Result<usize> {
        let node = self
            .node(history)
            .ok_or_else(|| Error::StrategyGap(format!("no belief node for history {history:?}")))?;
        Ok(maps.get(node.map)?.action(x))
    }

    /// Writes `depth,node_id,parent_id,observation,belief_*,map_index,value`
    /// in depth-first preorder; roots have parent `-1`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let width = self.roots.first().map_or(0, |r| r.2.belief.len());
        let mut header = vec![
            "depth".to_string(),
            "node_id".into(),
            "parent_id".into(),
            "observation".into(),
        ];
        header.extend((0..width).map(|z| format!("belief_{z}")));
        header.push("map_index".into());
        header.push("value".into());
        w.write_record(&header)?;
        let mut next_id = 0i64;
        for (y, _, node) in &self.roots {
            write_node(&mut w, node, 0, -1, *y, &mut next_id)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn write_node<W: Write>(
    w: &mut csv::Writer<W>,
    node: &BeliefNode,
    depth: usize,
    parent: i64,
    y: usize,
    next_id: &mut i64,
) -> Result<()> {
    let id = *next_id;
    *next_id += 1;
    let mut rec = vec![
        depth.to_string(),
        id.to_string(),
        parent.to_string(),
        y.to_string(),
    ];
    rec.extend(node.belief.probs.iter().map(|p| p.to_string()));
    rec.push(node.map.to_string());
    rec.push(node.value.to_string());
    w.write_record(&rec)?;
    for (cy, child) in &node.children {
        write_node(w, child, depth + 1, id, *cy, next_id)?;
    }
    Ok(())
}

struct Search<'a> {
    lifted: &'a LiftedMdp,
    channel: &'a ObservationChannel,
    horizon: usize,
    discount: f64,
    exec: Execution,
    visited: AtomicUsize,
    budget: u128,
}

impl Search<'_> {
    fn expand(&self, belief: Belief, t: usize) -> Result<BeliefNode> {
        let seen = self.visited.fetch_add(1, Ordering::Relaxed) as u128 + 1;
        if seen > self.budget {
            return Err(Error::BudgetExceeded {
                what: "belief-tree nodes",
                required: seen,
                budget: self.budget,
            });
        }
        let tables = self.lifted.stage(t)?;
        let last = t + 1 == self.horizon;
        let candidates = self.exec.try_map_range(tables.num_maps(), |g| {
            let cost = lift_belief_cost(&belief, g, tables);
            if last {
                return Ok::<_, Error>((cost, Vec::new()));
            }
            let prediction = predict(&belief, g, tables);
            let mut future = 0.0;
            let mut children = Vec::new();
            for (y, &py) in observation_probs(&prediction, self.channel)
                .iter()
                .enumerate()
            {
                if py <= 0.0 {
                    continue;
                }
                let (next, _) = filter(&prediction, y, self.channel)?;
                let child = self.expand(next, t + 1)?;
                future += py * child.value;
                children.push((y, child));
            }
            Ok((cost + self.discount * future, children))
        })?;
        let mut best = 0;
        for (g, c) in candidates.iter().enumerate() {
            if c.0 < candidates[best].0 {
                best = g;
            }
        }
        let (value, children) = candidates.into_iter().nth(best).expect("at least one map");
        Ok(BeliefNode {
            belief,
            map: best,
            value,
            children,
        })
    }
}

/// Upper bound on belief-tree nodes: `roots · Σ_{d<T} (|Y| · |maps|)^d`.
pub fn node_bound(num_obs: usize, num_maps: usize, horizon: usize) -> u128 {
    let branch = (num_obs as u128).saturating_mul(num_maps as u128);
    let mut level: u128 = 1;
    let mut total: u128 = 0;
    for _ in 0..horizon {
        total = total.saturating_add(level);
        level = level.saturating_mul(branch);
    }
    total.saturating_mul(num_obs as u128)
}

pub fn solve_pomdp_finite(
    model: &ModelSpec,
    lifted: &LiftedMdp,
    channel: &ObservationChannel,
    horizon: usize,
) -> Result<PomdpSolution> {
    solve_pomdp_finite_with(model, lifted, channel, horizon, PomdpOptions::default())
}

pub fn solve_pomdp_finite_with(
    model: &ModelSpec,
    lifted: &LiftedMdp,
    channel: &ObservationChannel,
    horizon: usize,
    options: PomdpOptions,
) -> Result<PomdpSolution> {
    if horizon == 0 {
        return Err(Error::invalid("horizon", "horizon must be positive"));
    }
    if let Horizon::Finite(t) = model.horizon() {
        if horizon > t && !lifted.is_shared() {
            return Err(Error::DimensionMismatch(format!(
                "horizon {horizon} exceeds the model's {t} stages"
            )));
        }
    }
    let required = node_bound(channel.num_obs, lifted.num_maps(), horizon);
    if required > options.node_budget {
        return Err(Error::BudgetExceeded {
            what: "belief-tree nodes",
            required,
            budget: options.node_budget,
        });
    }
    let search = Search {
        lifted,
        channel,
        horizon,
        discount: model.discount(),
        exec: options.exec,
        visited: AtomicUsize::new(0),
        budget: options.node_budget,
    };
    let roots = root_beliefs(model, lifted.space(), channel)?;
    let trees = options
        .exec
        .try_map_range(roots.len(), |i| search.expand(roots[i].2.clone(), 0))?;
    let roots: Vec<_> = roots
        .into_iter()
        .zip(trees)
        .map(|((y, p, _), node)| (y, p, node))
        .collect();
    let value = roots.iter().map(|(_, p, node)| p * node.value).sum();
    Ok(PomdpSolution {
        value,
        horizon,
        roots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifted::{build_lifted_mdp, CostSpec};
    use crate::mdp::{expected_value, solve_finite_horizon};
    use crate::model::{Dynamics, StochasticMatrix};

    fn q() -> StochasticMatrix {
        StochasticMatrix::from_rows(&[vec![0.25, 0.75], vec![0.375, 0.625]]).unwrap()
    }

    fn model(n: usize, horizon: usize) -> ModelSpec {
        let p1 = StochasticMatrix::mix(&StochasticMatrix::forcing(2, 0), &q(), 0.2).unwrap();
        ModelSpec::new(
            n,
            2,
            2,
            Dynamics::Homogeneous(vec![q(), p1]),
            CostSpec::exchangeable(|z, g| {
                (z.fraction(0) - 0.6).abs() + 0.1 * g.assignment().iter().sum::<usize>() as f64
            }),
            Horizon::Finite(horizon),
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn hand_bayes_example() {
        let m = model(1, 1);
        let lifted = build_lifted_mdp(&m).unwrap();
        // ranks: 0 = (0,1) "in state 1", 1 = (1,0) "in state 0"; symbol 0 reads state 0
        let channel = ObservationChannel::from_table(&[vec![0.2, 0.8], vec![0.8, 0.2]]).unwrap();
        let prior = Belief::uniform(2);
        let t = lifted.stage(0).unwrap();
        let pred = predict(&prior, 0, t);
        assert!((pred[0] - 0.6875).abs() < 1e-15 && (pred[1] - 0.3125).abs() < 1e-15);
        let post = belief_update(&prior, 0, 0, t, &channel).unwrap();
        assert!((post.probs()[1] - 0.25 / 0.3875).abs() < 1e-12);
        assert!((post.probs()[0] - 0.1375 / 0.3875).abs() < 1e-12);
    }

    #[test]
    fn noiseless_and_uninformative_updates() {
        let m = model(3, 1);
        let lifted = build_lifted_mdp(&m).unwrap();
        let t = lifted.stage(0).unwrap();
        let prior = Belief::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let pred = predict(&prior, 1, t);
        let exact = ObservationChannel::noiseless(4);
        for y in 0..4 {
            if pred[y] > 0.0 {
                assert_eq!(
                    belief_update(&prior, 1, y, t, &exact).unwrap(),
                    Belief::dirac(4, y)
                );
            }
        }
        let blind = ObservationChannel::uninformative(4);
        let post = belief_update(&prior, 1, 0, t, &blind).unwrap();
        for (a, b) in post.probs().iter().zip(&pred) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn impossible_observation_is_an_error() {
        let swap = StochasticMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let m = ModelSpec::new(
            2,
            2,
            1,
            Dynamics::Homogeneous(vec![swap]),
            CostSpec::zero(),
            Horizon::Finite(1),
            vec![0.5, 0.5],
        )
        .unwrap();
        let lifted = build_lifted_mdp(&m).unwrap();
        let err = belief_update(
            &Belief::dirac(3, 0),
            0,
            0,
            lifted.stage(0).unwrap(),
            &ObservationChannel::noiseless(3),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::ImpossibleObservation { observation: 0 }
        ));
    }

    #[test]
    fn belief_cost_examples() {
        let m = ModelSpec::new(
            2,
            2,
            1,
            Dynamics::Homogeneous(vec![q()]),
            CostSpec::exchangeable(|z, _| [1.0, 7.0, 3.0][2 - z.count(0) as usize]),
            Horizon::Finite(1),
            vec![0.5, 0.5],
        )
        .unwrap();
        let lifted = build_lifted_mdp(&m).unwrap();
        let t = lifted.stage(0).unwrap();
        let b = Belief::new(vec![0.5, 0.0, 0.5]).unwrap();
        assert_eq!(lift_belief_cost(&b, 0, t), 2.0);
        assert_eq!(lift_belief_cost(&Belief::dirac(3, 1), 0, t), t.cost(1, 0));
    }

    #[test]
    fn noiseless_value_matches_mdp() {
        for n in 1..=4 {
            for horizon in 1..=3 {
                let m = model(n, horizon);
                let lifted = build_lifted_mdp(&m).unwrap();
                let mdp = solve_finite_horizon(&m, &lifted).unwrap();
                let j = expected_value(&m, lifted.space(), mdp.values.initial());
                let channel = ObservationChannel::noiseless(lifted.num_states());
                let sol = solve_pomdp_finite(&m, &lifted, &channel, horizon).unwrap();
                assert!((sol.value - j).abs() < 1e-10, "n={n} T={horizon}");
            }
        }
    }

    #[test]
    fn one_stage_value_is_min_belief_cost() {
        let m = model(3, 1);
        let lifted = build_lifted_mdp(&m).unwrap();
        let channel =
            ObservationChannel::count_noise(lifted.space(), 0, &[0.25, 0.5, 0.25]).unwrap();
        let sol = solve_pomdp_finite(&m, &lifted, &channel, 1).unwrap();
        let t = lifted.stage(0).unwrap();
        for (_, _, node) in &sol.roots {
            let min = (0..4)
                .map(|g| lift_belief_cost(&node.belief, g, t))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(node.value, min);
            assert!(node.children.is_empty());
        }
    }

    #[test]
    fn tree_export_and_lookup() {
        let m = model(2, 2);
        let lifted = build_lifted_mdp(&m).unwrap();
        let channel = ObservationChannel::count_noise(lifted.space(), 0, &[0.1, 0.8, 0.1]).unwrap();
        let sol = solve_pomdp_finite(&m, &lifted, &channel, 2).unwrap();
        let (y1, _, root) = &sol.roots[0];
        let (y2, _) = &root.children[0];
        assert!(sol.node(&[*y1, *y2]).is_some());
        assert!(sol.action(&[*y1], 0, lifted.maps()).is_ok());
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "depth,node_id,parent_id,observation,belief_0,belief_1,belief_2,map_index,value\n"
        ));
        assert!(text.lines().nth(1).unwrap().starts_with("0,0,-1,"));
    }

    #[test]
    fn budget_is_enforced() {
        let m = model(4, 3);
        let lifted = build_lifted_mdp(&m).unwrap();
        let channel = ObservationChannel::noiseless(lifted.num_states());
        let err = solve_pomdp_finite_with(
            &m,
            &lifted,
            &channel,
            3,
            PomdpOptions {
                node_budget: 100,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
    }
}
