use mfteam::lifted::{build_lifted_mdp, lift_cost, lift_kernel_row, CostSpec, SmartGridCost};
use mfteam::mdp::{evaluate_policy, expected_value, solve_finite_horizon, ControllerStrategy};
use mfteam::model::{class_size, mean_field_of};
use mfteam::models::counterexample;
use mfteam::oracle::{
    brute_cost, brute_kernel, class_members, conditional_joint_law, conditional_kernel,
    exhaustive_symmetric_search, joint_policy_value, joint_strategy_value, random,
};
use mfteam::pomdp::{solve_pomdp_finite, ObservationChannel};
use mfteam::sim::{simulate, SimOptions, SimStrategy};
use mfteam::{Horizon, MeanField, ModelSpec};
use rand::RngExt;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn with_random_cost(m: ModelSpec, seed: u64, horizon: usize) -> ModelSpec {
    let cost = random::general_cost(&mut random::rng(seed), m.n(), m.k(), m.num_actions());
    m.with_cost(cost)
        .unwrap()
        .with_horizon(Horizon::Finite(horizon))
        .unwrap()
}

#[test]
fn lifted_kernel_matches_joint_enumeration() {
    let mut rng = random::rng(101);
    for case in 0..40 {
        let (n, k, a) = (1 + case % 4, 2 + case % 2, 1 + (case / 2) % 2);
        let m = random::model(&mut rng, n, k, a, Some(8));
        for z in m.mean_field_space().fields() {
            for g in m.map_space().maps() {
                let fast = lift_kernel_row(&m, z, g, 0).unwrap();
                let slow = brute_kernel(&m, z, g, 0).unwrap();
                for (x, y) in fast.iter().zip(&slow) {
                    assert!((x - y).abs() <= 1e-12, "case {case}: {x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn lifted_general_cost_matches_class_average() {
    let mut rng = random::rng(102);
    for case in 0..20 {
        let n = 1 + case % 5;
        let m = random::model(&mut rng, n, 2, 2, None);
        let m = m
            .with_cost(random::general_cost(&mut rng, n, 2, 2))
            .unwrap();
        for z in m.mean_field_space().fields() {
            for g in m.map_space().maps() {
                let fast = lift_cost(&m, z, g, 0).unwrap();
                assert!(fast.samples.is_none());
                assert!((fast.value - brute_cost(&m, z, g, 0).unwrap()).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn dynamic_program_matches_exhaustive_search() {
    let mut rng = random::rng(103);
    for seed in 0..6 {
        let n = 1 + seed as usize % 2;
        let m = with_random_cost(random::model(&mut rng, n, 2, 2, None), seed, 2);
        let lifted = build_lifted_mdp(&m).unwrap();
        let sol = solve_finite_horizon(&m, &lifted).unwrap();
        let dp = expected_value(&m, &m.mean_field_space(), sol.values.initial());
        let search = exhaustive_symmetric_search(&m).unwrap();
        assert!(
            (dp - search.value).abs() <= 1e-12,
            "{dp} vs {}",
            search.value
        );
        assert!((joint_policy_value(&m, &sol.policy).unwrap() - dp).abs() <= 1e-12);
    }
}

#[test]
fn policy_evaluation_agrees_with_the_joint_chain() {
    let mut rng = random::rng(104);
    let m = with_random_cost(random::model(&mut rng, 3, 2, 2, None), 9, 3);
    let lifted = build_lifted_mdp(&m).unwrap();
    let space = m.mean_field_space();
    for _ in 0..5 {
        let stages = (0..3)
            .map(|_| (0..space.len()).map(|_| rng.random_range(0..4)).collect())
            .collect();
        let policy = mfteam::mdp::Policy::new(stages).unwrap();
        let v = evaluate_policy(&m, &lifted, &policy).unwrap();
        let lifted_value = expected_value(&m, &space, v.initial());
        assert!((lifted_value - joint_policy_value(&m, &policy).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn counterexample_values() {
    let m = counterexample(1.0);
    let search = exhaustive_symmetric_search(&m).unwrap();
    assert!((search.value - 0.5).abs() <= 1e-12);
    let asym = joint_strategy_value(&m, |_, i, _, _| i).unwrap();
    assert_eq!(asym, 0.0);
    let scaled = exhaustive_symmetric_search(&counterexample(10.0)).unwrap();
    assert!((scaled.value - 5.0).abs() <= 1e-12);
    assert_eq!(scaled.policy, search.policy);
}

#[test]
fn noiseless_belief_tree_reduces_to_the_mdp() {
    let mut rng = random::rng(105);
    for (n, t) in [(2, 3), (4, 2), (6, 2), (3, 4)] {
        let m = random::model(&mut rng, n, 2, 2, None);
        let cost = CostSpec::SmartGrid(SmartGridCost::new(vec![0.0, 0.1], vec![0.7, 0.3]).unwrap());
        let m = m
            .with_cost(cost)
            .unwrap()
            .with_horizon(Horizon::Finite(t))
            .unwrap();
        let lifted = build_lifted_mdp(&m).unwrap();
        let sol = solve_finite_horizon(&m, &lifted).unwrap();
        let dp = expected_value(&m, &m.mean_field_space(), sol.values.initial());
        let channel = ObservationChannel::noiseless(lifted.num_states());
        let tree = solve_pomdp_finite(&m, &lifted, &channel, t).unwrap();
        assert!(
            (dp - tree.value).abs() <= 1e-10,
            "n={n}: {dp} vs {}",
            tree.value
        );
    }
}

fn random_history(
    rng: &mut rand::rngs::ChaCha8Rng,
    m: &ModelSpec,
    len: usize,
) -> Vec<(MeanField, usize)> {
    let space = m.mean_field_space();
    (0..len)
        .map(|_| {
            (
                space.get(rng.random_range(0..space.len())).unwrap().clone(),
                rng.random_range(0..m.map_space().len()),
            )
        })
        .collect()
}

#[test]
fn joint_state_is_uniform_given_the_mean_field_history() {
    let mut rng = random::rng(106);
    let mut checked = 0;
    while checked < 30 {
        let m = random::model(&mut rng, 3, 3, 2, None);
        let history = random_history(&mut rng, &m, 3);
        let Some(law) = conditional_joint_law(&m, &history).unwrap() else {
            continue;
        };
        let z = &history.last().unwrap().0;
        let members = class_members(z).unwrap();
        assert_eq!(law.len(), members.len());
        let uniform = 1.0 / members.len() as f64;
        for x in &members {
            assert!((law[x] - uniform).abs() < 1e-12);
        }
        checked += 1;
    }
}

#[test]
fn kernel_ignores_the_past() {
    let mut rng = random::rng(107);
    let mut checked = 0;
    while checked < 30 {
        let m = random::model(&mut rng, 3, 2, 2, None);
        let history = random_history(&mut rng, &m, 1 + checked % 3);
        let Some(row) = conditional_kernel(&m, &history).unwrap() else {
            continue;
        };
        let (z, g) = history.last().unwrap();
        let lifted = lift_kernel_row(&m, z, m.map_space().get(*g).unwrap(), 0).unwrap();
        for (a, b) in row.iter().zip(&lifted) {
            assert!((a - b).abs() < 1e-12);
        }
        checked += 1;
    }
}

#[test]
fn simulated_joint_states_are_uniform_within_a_class() {
    let m = random::model(&mut random::rng(108), 4, 2, 2, None)
        .with_horizon(Horizon::Finite(2))
        .unwrap();
    let lifted = build_lifted_mdp(&m).unwrap();
    let policy = mfteam::mdp::Policy::constant(lifted.num_states(), 2);
    let mut opts = SimOptions::new(5, 2, 20_000);
    opts.record_joint = true;
    opts.record_paths = true;
    let report = simulate(&m, &lifted, SimStrategy::Policy(&policy), &opts).unwrap();
    let z = MeanField::new(vec![2, 2]).unwrap();
    let members = class_members(&z).unwrap();
    let mut counts = vec![0f64; members.len()];
    for tr in &report.trajectories {
        let x = &tr.joint_states[1];
        if mean_field_of(x, 2).unwrap() == z {
            counts[members.iter().position(|m| m == x).unwrap()] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    assert!(total > 1000.0);
    let e = total / members.len() as f64;
    let stat: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
    let crit = ChiSquared::new((members.len() - 1) as f64)
        .unwrap()
        .inverse_cdf(0.999);
    assert_eq!(class_size(&z), 6u32.into());
    assert!(stat < crit, "chi-square {stat} ≥ {crit}");
}

#[test]
fn relabelling_subsystems_leaves_the_cost_law_unchanged() {
    let m = mfteam::models::smart_grid();
    let m = ModelSpec::new(
        6,
        2,
        3,
        m.dynamics().clone(),
        m.cost().clone(),
        Horizon::Discounted(0.9),
        m.init_dist().to_vec(),
    )
    .unwrap();
    let lifted = build_lifted_mdp(&m).unwrap();
    let sol = mfteam::mdp::solve_discounted(&m, &lifted, 1e-8).unwrap();
    let ctrl = ControllerStrategy::from_policy(&sol.policy, lifted.maps()).unwrap();
    let run = |x: Vec<usize>, seed| {
        let mut opts = SimOptions::new(seed, 30, 4000);
        opts.initial = Some(x);
        simulate(&m, &lifted, SimStrategy::Controller(&ctrl), &opts).unwrap()
    };
    let a = run(vec![0, 0, 1, 1, 1, 0], 1);
    let b = run(vec![1, 0, 1, 0, 0, 1], 2);
    let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    assert!(
        (a.mean - b.mean).abs() < 4.0 * se,
        "{} vs {} (se {se})",
        a.mean,
        b.mean
    );
}
