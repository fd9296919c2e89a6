use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfteam::lifted::{build_lifted_mdp, build_lifted_mdp_with, BuildOptions};
use mfteam::mdp::{solve_discounted_with, DiscountedOptions};
use mfteam::models::smart_grid;
use mfteam::sim::{simulate, SimOptions, SimStrategy};
use mfteam::Execution;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn lifting(c: &mut Criterion) {
    let m = smart_grid();
    let mut group = c.benchmark_group("build_lifted_mdp");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                build_lifted_mdp_with(
                    &m,
                    BuildOptions {
                        exec,
                        ..Default::default()
                    },
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn value_iteration(c: &mut Criterion) {
    let m = smart_grid();
    let lifted = build_lifted_mdp(&m).unwrap();
    let mut group = c.benchmark_group("solve_discounted");
    for (name, exec) in MODES {
        let mut opts = DiscountedOptions::new(1e-8);
        opts.exec = exec;
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| solve_discounted_with(&m, &lifted, opts).unwrap())
        });
    }
    group.finish();
}

fn simulation(c: &mut Criterion) {
    let m = smart_grid();
    let lifted = build_lifted_mdp(&m).unwrap();
    let sol = solve_discounted_with(&m, &lifted, DiscountedOptions::new(1e-8)).unwrap();
    let mut group = c.benchmark_group("simulate_1000x135");
    group.sample_size(10);
    for (name, exec) in MODES {
        let mut opts = SimOptions::new(7, 135, 1000);
        opts.exec = exec;
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulate(&m, &lifted, SimStrategy::Policy(&sol.policy), &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, lifting, value_iteration, simulation);
criterion_main!(benches);
