//! Monte Carlo simulation of the full `n`-subsystem system.
//!
//! Randomness is keyed by `(seed, episode, step, slot)`: each episode owns the
//! ChaCha8 stream `episode` under key `seed`, and the draw for `(step, slot)`
//! sits at a fixed position of that stream. Slots `0..n` are the subsystems
//! (initial states at step 0, transitions into step `s` afterwards) and slot
//! `n` is the observation of `z_s`. Every slot consumes one `u64` whether or
//! not it is used, so positions never drift and thread count is irrelevant.

use std::io::Write;

use rand::rngs::ChaCha8Rng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lifted::{lift_cost, lift_kernel_row, LiftedMdp};
use crate::mdp::{ControllerStrategy, Policy};
use crate::model::{mean_field_of, CoordinationMap, Horizon, MeanField, ModelSpec};
use crate::pomdp::{ObservationChannel, PomdpSolution};

/// A symmetric strategy the simulator can execute.
#[derive(Clone, Copy, Debug)]
pub enum SimStrategy<'a> {
    Policy(&'a Policy),
    Controller(&'a ControllerStrategy),
    /// Belief-tree strategy with the channel that produces its observations.
    Belief {
        solution: &'a PomdpSolution,
        channel: &'a ObservationChannel,
    },
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub seed: u64,
    pub horizon_steps: usize,
    pub episodes: usize,
    /// Keep `z_t`, maps and stage costs per episode.
    pub record_paths: bool,
    /// Also keep the joint state at every step.
    pub record_joint: bool,
    /// Fixed initial joint state instead of i.i.d. draws from `init_dist`.
    pub initial: Option<Vec<usize>>,
    pub exec: Execution,
}

impl SimOptions {
    pub fn new(seed: u64, horizon_steps: usize, episodes: usize) -> Self {
        SimOptions {
            seed,
            horizon_steps,
            episodes,
            record_paths: false,
            record_joint: false,
            initial: None,
            exec: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub episode: usize,
    /// `z_t` for `t = 0..horizon_steps`.
    pub mean_fields: Vec<MeanField>,
    pub maps: Vec<usize>,
    pub stage_costs: Vec<f64>,
    pub observations: Vec<usize>,
    pub joint_states: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimReport {
    /// Sample mean of the (discounted) episode cost.
    pub mean: f64,
    pub std_error: f64,
    pub episodes: usize,
    pub seed: u64,
    pub returns: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
}

/// Stream word offset of the draw for `(step, slot)` with `n` subsystems.
pub fn draw_position(step: usize, slot: usize, n: usize) -> u128 {
    2 * (step as u128 * (n as u128 + 1) + slot as u128)
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Inverse-CDF draw from `p`; rounding slack goes to the last positive entry.
fn categorical(p: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            cum += pi;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64);
    rng
}

struct Episode {
    total: f64,
    path: Option<Trajectory>,
}

fn choose_map(
    strategy: &SimStrategy<'_>,
    model: &ModelSpec,
    lifted: &LiftedMdp,
    step: usize,
    z: &MeanField,
    history: &[usize],
) -> Result<usize> {
    let rank = lifted.space().rank(z)?;
    match strategy {
        SimStrategy::Policy(p) => {
            if !p.is_stationary() && step >= p.stage_count() {
                return Err(Error::StrategyGap(format!("policy has no stage {step}")));
            }
            Ok(p.map_at(step, rank))
        }
        SimStrategy::Controller(c) => {
            if c.stage_count() != 1 && step >= c.stage_count() {
                return Err(Error::StrategyGap(format!(
                    "controller table has no stage {step}"
                )));
            }
            Ok(c.map_at(step, rank, model.num_actions())?
                .index(model.num_actions()))
        }
        SimStrategy::Belief { solution, .. } => solution
            .node(history)
            .map(|node| node.map)
            .ok_or_else(|| Error::StrategyGap(format!("no belief node for history {history:?}"))),
    }
}

fn run_episode(
    model: &ModelSpec,
    lifted: &LiftedMdp,
    strategy: &SimStrategy<'_>,
    options: &SimOptions,
    episode: usize,
) -> Result<Episode> {
    let n = model.n();
    let k = model.k();
    let discount = model.discount();
    let channel = match strategy {
        SimStrategy::Belief { channel, .. } => Some(*channel),
        _ => None,
    };
    let mut rng = episode_rng(options.seed, episode);
    let mut states: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let u = uniform(&mut rng);
        states.push(match &options.initial {
            Some(init) => init[i],
            None => categorical(model.init_dist(), u),
        });
    }
    let mut history = Vec::new();
    let mut path = options.record_paths.then(|| Trajectory {
        episode,
        mean_fields: Vec::new(),
        maps: Vec::new(),
        stage_costs: Vec::new(),
        observations: Vec::new(),
        joint_states: Vec::new(),
    });
    let mut total = 0.0;
    let mut weight = 1.0;
    for step in 0..options.horizon_steps {
        debug_assert_eq!(rng.get_word_pos(), draw_position(step, n, n));
        let z = mean_field_of(&states, k)?;
        let u_obs = uniform(&mut rng);
        if let Some(ch) = channel {
            let rank = lifted.space().rank(&z)?;
            let column: Vec<f64> = (0..ch.num_obs()).map(|y| ch.likelihood(y, rank)).collect();
            history.push(categorical(&column, u_obs));
        }
        let g = choose_map(strategy, model, lifted, step, &z, &history)?;
        let map = lifted.maps().get(g)?;
        let cost = stage_cost(model, step, &z, map, &states)?;
        total += weight * cost;
        weight *= discount;

        if let Some(p) = path.as_mut() {
            p.mean_fields.push(z.clone());
            p.maps.push(g);
            p.stage_costs.push(cost);
            if options.record_joint {
                p.joint_states.push(states.clone());
            }
        }

        let matrices = model.dynamics().matrices(&z, step);
        for x in states.iter_mut() {
            let row = matrices[map.action(*x)].row(*x);
            *x = categorical(row, uniform(&mut rng));
        }
    }
    if let Some(p) = path.as_mut() {
        p.observations = history;
    }
    Ok(Episode { total, path })
}

fn stage_cost(
    model: &ModelSpec,
    step: usize,
    z: &MeanField,
    map: &CoordinationMap,
    states: &[usize],
) -> Result<f64> {
    if model.cost().is_exchangeable(step) {
        Ok(lift_cost(model, z, map, step)?.value)
    } else {
        let actions: Vec<usize> = states.iter().map(|&x| map.action(x)).collect();
        model
            .cost()
            .joint_cost(step, states, &actions, model.k(), Some(map))
    }
}

pub fn simulate(
    model: &ModelSpec,
    lifted: &LiftedMdp,
    strategy: SimStrategy<'_>,
    options: &SimOptions,
) -> Result<SimReport> {
    if options.episodes == 0 {
        return Err(Error::invalid(
            "episodes",
            "at least one episode is required",
        ));
    }
    if let Some(init) = &options.initial {
        if init.len() != model.n() || init.iter().any(|&x| x >= model.k()) {
            return Err(Error::invalid(
                "initial",
                "joint state must list n valid local states",
            ));
        }
    }
    if let Horizon::Finite(t) = model.horizon() {
        if options.horizon_steps > t && !lifted.is_shared() {
            return Err(Error::DimensionMismatch(format!(
                "{} steps requested, model has {t} stages",
                options.horizon_steps
            )));
        }
    }
    let runs = options.exec.try_map_range(options.episodes, |e| {
        run_episode(model, lifted, &strategy, options, e)
    })?;
    let returns: Vec<f64> = runs.iter().map(|r| r.total).collect();
    let (mean, std_error) = mean_and_error(&returns);
    Ok(SimReport {
        mean,
        std_error,
        episodes: options.episodes,
        seed: options.seed,
        returns,
        trajectories: runs.into_iter().filter_map(|r| r.path).collect(),
    })
}

/// Sample mean and standard error, summed in index order.
pub fn mean_and_error(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Smallest `t` with `β^t · cost_max < eps` (at least 1).
pub fn truncation_horizon(beta: f64, cost_max: f64, eps: f64) -> usize {
    let mut t = 0;
    let mut tail = cost_max.abs();
    while tail >= eps {
        tail *= beta;
        t += 1;
    }
    t.max(1)
}

/// Words per kernel-validation chunk; chunk `c` uses stream `c`.
const VALIDATION_CHUNK: usize = 1024;

/// Failure probability of the validation bound.
pub const VALIDATION_DELTA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelValidation {
    pub tv: f64,
    pub bound: f64,
    pub passed: bool,
    pub empirical: Vec<f64>,
}

/// Samples `num_samples` one-step transitions from `z` under `map` and
/// compares the empirical next-mean-field law with the exact kernel row.
///
/// The bound is the 99% quantile of the multinomial concentration inequality
/// `P(‖p̂ − p‖₁ ≥ ε) ≤ 2^K exp(−N ε² / 2)` with `K = |M_n|`, halved for total
/// variation, so a correct kernel fails at most 1% of the time.
pub fn validate_kernel(
    model: &ModelSpec,
    z: &MeanField,
    map: &CoordinationMap,
    stage: usize,
    seed: u64,
    num_samples: usize,
    exec: Execution,
) -> Result<KernelValidation> {
    if num_samples == 0 {
        return Err(Error::invalid(
            "num_samples",
            "at least one sample is required",
        ));
    }
    let space = model.mean_field_space();
    let exact = lift_kernel_row(model, z, map, stage)?;
    let start = z.sorted_joint_state();
    let matrices = model.dynamics().matrices(z, stage);
    let k = model.k();
    let chunks = num_samples.div_ceil(VALIDATION_CHUNK);
    let partial = exec.try_map_range(chunks, |c| {
        let mut rng = episode_rng(seed, c);
        let mut counts = vec![0u64; space.len()];
        let mut next = vec![0u32; k];
        let len = VALIDATION_CHUNK.min(num_samples - c * VALIDATION_CHUNK);
        for _ in 0..len {
            next.iter_mut().for_each(|v| *v = 0);
            for &x in &start {
                let y = categorical(matrices[map.action(x)].row(x), uniform(&mut rng));
                next[y] += 1;
            }
            counts[space.rank(&MeanField::new(next.clone())?)?] += 1;
        }
        Ok::<_, Error>(counts)
    })?;
    let mut counts = vec![0u64; space.len()];
    for part in &partial {
        for (a, b) in counts.iter_mut().zip(part) {
            *a += b;
        }
    }
    let total = num_samples as f64;
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let tv = 0.5
        * empirical
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    let bound = tv_bound(space.len(), num_samples, VALIDATION_DELTA);
    Ok(KernelValidation {
        tv,
        bound,
        passed: tv <= bound,
        empirical,
    })
}

/// `sqrt((K ln 2 + ln(1/δ)) / (2N))`.
pub fn tv_bound(support: usize, samples: usize, delta: f64) -> f64 {
    ((support as f64 * std::f64::consts::LN_2 + (1.0 / delta).ln()) / (2.0 * samples as f64)).sqrt()
}

/// Writes `episode,t,count_*,map_index,stage_cost`.
pub fn write_trajectories_csv<W: Write>(report: &SimReport, k: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["episode".to_string(), "t".to_string()];
    header.extend((0..k).map(|x| format!("count_{x}")));
    header.push("map_index".into());
    header.push("stage_cost".into());
    w.write_record(&header)?;
    for tr in &report.trajectories {
        for (t, z) in tr.mean_fields.iter().enumerate() {
            let mut rec = vec![tr.episode.to_string(), t.to_string()];
            rec.extend(z.counts().iter().map(|c| c.to_string()));
            rec.push(tr.maps[t].to_string());
            rec.push(tr.stage_costs[t].to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `policy_id,mean,std_error,num_episodes,seed`, one row per report.
pub fn write_summary_csv<W: Write>(rows: &[(&str, &SimReport)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["policy_id", "mean", "std_error", "num_episodes", "seed"])?;
    for (id, r) in rows {
        w.write_record([
            id.to_string(),
            r.mean.to_string(),
            r.std_error.to_string(),
            r.episodes.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifted::{build_lifted_mdp, CostSpec};
    use crate::model::{Dynamics, StochasticMatrix};

    fn q() -> StochasticMatrix {
        StochasticMatrix::from_rows(&[vec![0.25, 0.75], vec![0.375, 0.625]]).unwrap()
    }

    fn model(n: usize, horizon: Horizon) -> ModelSpec {
        let p1 = StochasticMatrix::mix(&StochasticMatrix::forcing(2, 0), &q(), 0.2).unwrap();
        ModelSpec::new(
            n,
            2,
            2,
            Dynamics::Homogeneous(vec![q(), p1]),
            CostSpec::exchangeable(|z, _| z.fraction(1)),
            horizon,
            vec![1.0 / 3.0, 2.0 / 3.0],
        )
        .unwrap()
    }

    #[test]
    fn positions_follow_the_keying_contract() {
        let mut rng = episode_rng(9, 3);
        for _ in 0..7 {
            rng.next_u64();
        }
        let mut seek = episode_rng(9, 3);
        seek.set_word_pos(draw_position(1, 2, 4));
        assert_eq!(rng.next_u64(), seek.next_u64());
    }

    #[test]
    fn categorical_draws() {
        let p = [0.25, 0.0, 0.75];
        assert_eq!(categorical(&p, 0.0), 0);
        assert_eq!(categorical(&p, 0.2499), 0);
        assert_eq!(categorical(&p, 0.25), 2);
        assert_eq!(categorical(&p, 0.999_999_999_999), 2);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let m = model(10, Horizon::Discounted(0.9));
        let lifted = build_lifted_mdp(&m).unwrap();
        let policy = Policy::constant(lifted.num_states(), 1);
        let mut opts = SimOptions::new(42, 20, 30);
        opts.record_paths = true;
        let a = simulate(&m, &lifted, SimStrategy::Policy(&policy), &opts).unwrap();
        opts.exec = Execution::Sequential;
        let b = simulate(&m, &lifted, SimStrategy::Policy(&policy), &opts).unwrap();
        assert_eq!(a, b);
        opts.seed = 43;
        let c = simulate(&m, &lifted, SimStrategy::Policy(&policy), &opts).unwrap();
        assert_ne!(a.returns, c.returns);
    }

    #[test]
    fn deterministic_model_kernel_validation_is_exact() {
        let swap = StochasticMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let m = ModelSpec::new(
            5,
            2,
            1,
            Dynamics::Homogeneous(vec![swap]),
            CostSpec::zero(),
            Horizon::Finite(1),
            vec![0.5, 0.5],
        )
        .unwrap();
        let z = MeanField::new(vec![3, 2]).unwrap();
        let v = validate_kernel(
            &m,
            &z,
            &CoordinationMap::constant(2, 0),
            0,
            1,
            5000,
            Execution::default(),
        )
        .unwrap();
        assert_eq!(v.tv, 0.0);
        assert!(v.passed);
    }

    #[test]
    fn single_sample_gives_a_valid_distance() {
        let m = model(6, Horizon::Finite(1));
        let z = MeanField::new(vec![2, 4]).unwrap();
        let v = validate_kernel(
            &m,
            &z,
            &CoordinationMap::constant(2, 1),
            0,
            5,
            1,
            Execution::default(),
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&v.tv));
    }

    #[test]
    fn finite_horizon_totals_are_undiscounted() {
        let m = model(4, Horizon::Finite(3));
        let lifted = build_lifted_mdp(&m).unwrap();
        let policy = Policy::constant(lifted.num_states(), 0);
        let mut opts = SimOptions::new(1, 3, 5);
        opts.record_paths = true;
        let r = simulate(&m, &lifted, SimStrategy::Policy(&policy), &opts).unwrap();
        for (tr, total) in r.trajectories.iter().zip(&r.returns) {
            assert_eq!(tr.stage_costs.iter().sum::<f64>(), *total);
            assert_eq!(tr.mean_fields.len(), 3);
        }
    }

    #[test]
    fn truncation() {
        assert_eq!(truncation_horizon(0.5, 1.0, 0.3), 2);
        assert_eq!(truncation_horizon(0.9, 0.0, 1e-6), 1);
        let t = truncation_horizon(0.9, 2.0, 1e-6);
        assert!(0.9f64.powi(t as i32) * 2.0 < 1e-6 && 0.9f64.powi(t as i32 - 1) * 2.0 >= 1e-6);
    }

    #[test]
    fn csv_layouts() {
        let m = model(3, Horizon::Finite(2));
        let lifted = build_lifted_mdp(&m).unwrap();
        let policy = Policy::constant(lifted.num_states(), 0);
        let mut opts = SimOptions::new(7, 2, 2);
        opts.record_paths = true;
        let r = simulate(&m, &lifted, SimStrategy::Policy(&policy), &opts).unwrap();
        let mut buf = Vec::new();
        write_trajectories_csv(&r, 2, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("episode,t,count_0,count_1,map_index,stage_cost\n"));
        assert_eq!(text.lines().count(), 5);
        let mut buf = Vec::new();
        write_summary_csv(&[("free", &r)], &mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("policy_id,mean,std_error,num_episodes,seed\nfree,"));
    }

    #[test]
    fn gaps_are_reported() {
        let m = model(3, Horizon::Finite(2));
        let lifted = build_lifted_mdp(&m).unwrap();
        let policy = Policy::new(vec![vec![0; 4], vec![0; 4]]).unwrap();
        let err = simulate(
            &m,
            &lifted,
            SimStrategy::Policy(&policy),
            &SimOptions::new(1, 3, 1),
        );
        assert!(matches!(err, Err(Error::StrategyGap(_))));
    }
}
