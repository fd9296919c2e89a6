use mfteam::lifted::{build_lifted_mdp, lift_kernel_row, CostSpec};
use mfteam::mdp::solve_finite_horizon;
use mfteam::model::{
    class_size, composition_count, enumerate_mean_fields, mean_field_of, rank, unrank,
};
use mfteam::oracle::random;
use mfteam::pomdp::{belief_update, observation_probs, predict, Belief, ObservationChannel};
use mfteam::{CoordinationMap, Horizon, MeanField, ModelSpec};
use num_bigint::BigUint;
use proptest::prelude::*;

fn small_model(seed: u64, n: usize, k: usize, a: usize) -> ModelSpec {
    random::model(&mut random::rng(seed), n, k, a, None)
}

/// Exchangeable cost read from a seeded table over `(rank z, map index)`.
fn table_cost(seed: u64, states: usize, maps: usize, num_actions: usize, scale: f64) -> CostSpec {
    let mut rng = random::rng(seed);
    let table: Vec<f64> = (0..states * maps)
        .map(|_| random::distribution(&mut rng, 2, None)[0] * scale)
        .collect();
    CostSpec::exchangeable(move |z: &MeanField, g: &CoordinationMap| {
        table[rank(z) * maps + g.index(num_actions)]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_unrank_bijection(n in 0usize..9, k in 1usize..5) {
        let fields = enumerate_mean_fields(n, k);
        prop_assert_eq!(fields.len(), composition_count(n, k));
        for (i, z) in fields.iter().enumerate() {
            prop_assert_eq!(rank(z), i);
            prop_assert_eq!(&unrank(i, n, k).unwrap(), z);
        }
        prop_assert!(unrank(fields.len(), n, k).is_err());
    }

    #[test]
    fn class_sizes_partition_joint_space(n in 0usize..12, k in 1usize..5) {
        let total: BigUint = enumerate_mean_fields(n, k).iter().map(class_size).sum();
        prop_assert_eq!(total, BigUint::from(k).pow(n as u32));
    }

    #[test]
    fn mean_field_of_is_permutation_invariant(
        (x, y) in proptest::collection::vec(0usize..4, 0..12)
            .prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle()))
    ) {
        let a = mean_field_of(&x, 4).unwrap();
        prop_assert_eq!(&a, &mean_field_of(&y, 4).unwrap());
        prop_assert_eq!(a.n() as usize, x.len());
    }

    #[test]
    fn kernel_rows_are_stochastic(
        seed in any::<u64>(), n in 1usize..7, k in 2usize..4, a in 1usize..3, zi in any::<usize>(), gi in any::<usize>()
    ) {
        let m = small_model(seed, n, k, a);
        let space = m.mean_field_space();
        let maps = m.map_space();
        let z = space.get(zi % space.len()).unwrap();
        let g = maps.get(gi % maps.len()).unwrap();
        let row = lift_kernel_row(&m, z, g, 0).unwrap();
        prop_assert_eq!(row.len(), space.len());
        prop_assert!(row.iter().all(|&p| (0.0..=1.0 + 1e-12).contains(&p)));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn kernel_preserves_the_mean_flow(
        seed in any::<u64>(), n in 1usize..7, k in 2usize..4, a in 1usize..3, zi in any::<usize>(), gi in any::<usize>()
    ) {
        // E[Z'] must equal the one-step image of the fractions.
        let m = small_model(seed, n, k, a);
        let space = m.mean_field_space();
        let maps = m.map_space();
        let z = space.get(zi % space.len()).unwrap();
        let g = maps.get(gi % maps.len()).unwrap();
        let row = lift_kernel_row(&m, z, g, 0).unwrap();
        let mats = m.dynamics().matrices(z, 0);
        for y in 0..k {
            let expected: f64 = (0..k).map(|x| z.fraction(x) * mats[g.action(x)].get(x, y)).sum();
            let mean: f64 = space.fields().iter().zip(&row).map(|(w, p)| p * w.fraction(y)).sum();
            prop_assert!((mean - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_stays_on_the_simplex(seed in any::<u64>(), n in 1usize..6, gi in any::<usize>()) {
        let m = small_model(seed, n, 3, 2);
        let lifted = build_lifted_mdp(&m).unwrap();
        let mut rng = random::rng(seed ^ 1);
        let belief = Belief::new(random::distribution(&mut rng, lifted.num_states(), Some(5))).unwrap();
        let pred = predict(&belief, gi % lifted.num_maps(), lifted.stage(0).unwrap());
        prop_assert!(pred.iter().all(|&p| p >= 0.0));
        prop_assert!((pred.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn filtering_averages_back_to_the_prediction(seed in any::<u64>(), n in 1usize..5, obs in 1usize..5, gi in any::<usize>()) {
        let m = small_model(seed, n, 2, 2);
        let lifted = build_lifted_mdp(&m).unwrap();
        let tables = lifted.stage(0).unwrap();
        let mut rng = random::rng(seed ^ 2);
        let s = lifted.num_states();
        let channel = ObservationChannel::from_table(
            &(0..s).map(|_| random::distribution(&mut rng, obs, None)).collect::<Vec<_>>(),
        ).unwrap();
        let belief = Belief::new(random::distribution(&mut rng, s, None)).unwrap();
        let g = gi % lifted.num_maps();
        let pred = predict(&belief, g, tables);
        let py = observation_probs(&pred, &channel);
        let mut mix = vec![0.0; s];
        for (y, &p) in py.iter().enumerate() {
            let post = belief_update(&belief, g, y, tables, &channel).unwrap();
            for (acc, q) in mix.iter_mut().zip(post.probs()) {
                *acc += p * q;
            }
        }
        for (a, b) in mix.iter().zip(&pred) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmin_is_invariant_under_cost_scaling(seed in any::<u64>(), n in 1usize..5, power in -4i32..5) {
        let base = small_model(seed, n, 2, 2).with_horizon(Horizon::Finite(3)).unwrap();
        let states = base.mean_field_space().len();
        let maps = base.map_space().len();
        let c = 2f64.powi(power);
        let m1 = base.with_cost(table_cost(seed, states, maps, 2, 1.0)).unwrap();
        let m2 = base.with_cost(table_cost(seed, states, maps, 2, c)).unwrap();
        let s1 = solve_finite_horizon(&m1, &build_lifted_mdp(&m1).unwrap()).unwrap();
        let s2 = solve_finite_horizon(&m2, &build_lifted_mdp(&m2).unwrap()).unwrap();
        prop_assert_eq!(s1.policy, s2.policy);
        for (a, b) in s1.values.initial().iter().zip(s2.values.initial()) {
            prop_assert_eq!(a * c, *b);
        }
    }
}

#[test]
fn dirac_mean_field_ranks() {
    assert_eq!(rank(&MeanField::new(vec![0, 2]).unwrap()), 0);
    assert_eq!(rank(&MeanField::new(vec![1, 0, 0]).unwrap()), 2);
}
