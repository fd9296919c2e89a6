use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use mfteam::config::{load_model, LoadedModel};
use mfteam::mdp::{
    evaluate_policy, expected_value, read_policy_csv, solve_discounted, solve_finite_horizon,
    write_policy_csv, Policy, ValueFunction,
};
use mfteam::pomdp::solve_pomdp_finite;
use mfteam::sim::{
    simulate, truncation_horizon, write_summary_csv, write_trajectories_csv, SimOptions,
    SimStrategy,
};
use mfteam::{build_lifted_mdp, ErrorClass, Horizon, LiftedMdp, ModelSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_BUDGET: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_VERIFY: u8 = 5;

/// Tail weight below which discounted simulations stop.
const TRUNCATION_EPS: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(
    name = "mfteam",
    version,
    about = "Team-optimal control of identical subsystems sharing their mean-field"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Model file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for CSV files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Bound on the value error of discounted solves.
    #[arg(long, global = true, default_value_t = 1e-8)]
    tol: f64,

    #[arg(long, global = true)]
    episodes: Option<usize>,

    /// Steps to simulate, or stages for `solve-pomdp`.
    #[arg(long, global = true)]
    horizon: Option<usize>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the mean-field MDP and write the policy with its values.
    SolveMdp,
    /// Solve the partially observed problem on its belief tree.
    SolvePomdp,
    /// Simulate the solved policy and the always-free baseline.
    Simulate {
        /// Episodes whose full paths are written.
        #[arg(long, default_value_t = 10)]
        paths: usize,
    },
    /// Evaluate a policy CSV exactly.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
    },
    /// Write the lifted kernel and cost tables.
    ExportKernel,
    /// Compare the fast paths against brute-force oracles on a model corpus.
    Verify {
        /// Directory of model files; defaults to the bundled corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Policy, value and sample-path data for a two-state model.
    FigureData,
}

/// Failure of the `verify` subcommand, kept apart from model errors.
#[derive(Debug)]
struct VerifyFailed(usize);

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} oracle check(s) failed", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match cli.threads {
        Some(t) => rayon::ThreadPoolBuilder::new().num_threads(t).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let result = match pool {
        Ok(pool) => pool.install(|| run(&cli)),
        Err(e) => Err(anyhow!(e)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<VerifyFailed>().is_some() {
        return EXIT_VERIFY;
    }
    match e.downcast_ref::<mfteam::Error>().map(mfteam::Error::class) {
        Some(ErrorClass::Budget) => EXIT_BUDGET,
        Some(ErrorClass::Numeric) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SolveMdp => solve_mdp(cli),
        Command::SolvePomdp => solve_pomdp(cli),
        Command::Simulate { paths } => simulate_cmd(cli, *paths),
        Command::Evaluate { policy } => evaluate(cli, policy),
        Command::ExportKernel => export_kernel(cli),
        Command::Verify { corpus } => verify(corpus.as_deref()),
        Command::FigureData => figure_data(cli),
    }
}

fn load(cli: &Cli) -> Result<LoadedModel> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| mfteam::Error::InvalidModel {
            path: "--config".into(),
            message: "a model file is required".into(),
        })?;
    Ok(load_model(path)?)
}

fn require_seed(cli: &Cli) -> Result<u64> {
    cli.seed.ok_or_else(|| {
        mfteam::Error::InvalidModel {
            path: "--seed".into(),
            message: "an explicit seed is required".into(),
        }
        .into()
    })
}

fn out_file(cli: &Cli, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let path = cli.out.join(name);
    let f = File::create(&path)
        .map_err(mfteam::Error::from)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(BufWriter::new(f))
}

struct Solved {
    policy: Policy,
    values: ValueFunction,
    /// `Σ_z P(Z_1 = z) V(z)`.
    expected: f64,
}

fn solve(model: &ModelSpec, lifted: &LiftedMdp, tol: f64, verbose: bool) -> Result<Solved> {
    let (policy, values) = match model.horizon() {
        Horizon::Finite(_) => {
            let s = solve_finite_horizon(model, lifted)?;
            (s.policy, s.values)
        }
        Horizon::Discounted(_) => {
            let s = solve_discounted(model, lifted, tol)?;
            if verbose {
                println!(
                    "value iteration: {} iterations, value error bound {:e}",
                    s.iterations, s.value_error_bound
                );
            }
            (s.policy, s.values)
        }
    };
    let expected = expected_value(model, lifted.space(), values.initial());
    Ok(Solved {
        policy,
        values,
        expected,
    })
}

fn solve_mdp(cli: &Cli) -> Result<()> {
    let model = load(cli)?.spec;
    let lifted = build_lifted_mdp(&model)?;
    println!(
        "{} mean-fields, {} coordination maps",
        lifted.num_states(),
        lifted.num_maps()
    );
    let s = solve(&model, &lifted, cli.tol, true)?;
    write_policy_csv(
        lifted.space(),
        lifted.maps(),
        &s.policy,
        &s.values,
        out_file(cli, "policy.csv")?,
    )?;
    println!("expected cost {}", s.expected);
    Ok(())
}

fn solve_pomdp(cli: &Cli) -> Result<()> {
    let loaded = load(cli)?;
    let channel = loaded.channel.ok_or_else(|| mfteam::Error::InvalidModel {
        path: "observation".into(),
        message: "solve-pomdp needs an [observation] section".into(),
    })?;
    let model = loaded.spec;
    let horizon = match (cli.horizon, model.horizon()) {
        (Some(h), _) => h,
        (None, Horizon::Finite(t)) => t,
        (None, Horizon::Discounted(_)) => bail!(mfteam::Error::InvalidModel {
            path: "--horizon".into(),
            message: "discounted models need an explicit horizon".into(),
        }),
    };
    let lifted = build_lifted_mdp(&model)?;
    let sol = solve_pomdp_finite(&model, &lifted, &channel, horizon)?;
    sol.write_csv(out_file(cli, "belief_tree.csv")?)?;
    println!("{} root beliefs, horizon {horizon}", sol.roots.len());
    println!("expected cost {}", sol.value);
    Ok(())
}

fn sim_horizon(cli: &Cli, model: &ModelSpec, lifted: &LiftedMdp) -> Result<usize> {
    if let Some(h) = cli.horizon {
        return Ok(h);
    }
    Ok(match model.horizon() {
        Horizon::Finite(t) => t,
        Horizon::Discounted(beta) => {
            truncation_horizon(beta, lifted.stage(0)?.max_abs_cost(), TRUNCATION_EPS)
        }
    })
}

fn simulate_cmd(cli: &Cli, paths: usize) -> Result<()> {
    let seed = require_seed(cli)?;
    let model = load(cli)?.spec;
    let lifted = build_lifted_mdp(&model)?;
    let s = solve(&model, &lifted, cli.tol, false)?;
    let steps = sim_horizon(cli, &model, &lifted)?;
    let episodes = cli.episodes.unwrap_or(10_000);
    let opts = SimOptions::new(seed, steps, episodes);
    let free = Policy::constant(lifted.num_states(), 0);
    let solved = simulate(&model, &lifted, SimStrategy::Policy(&s.policy), &opts)?;
    let baseline = simulate(&model, &lifted, SimStrategy::Policy(&free), &opts)?;

    let mut recorded = SimOptions::new(seed, steps, paths.min(episodes).max(1));
    recorded.record_paths = true;
    let sample = simulate(&model, &lifted, SimStrategy::Policy(&s.policy), &recorded)?;
    write_trajectories_csv(&sample, model.k(), out_file(cli, "trajectories.csv")?)?;
    write_summary_csv(
        &[("optimal", &solved), ("always-free", &baseline)],
        out_file(cli, "summary.csv")?,
    )?;
    println!("{episodes} episodes of {steps} steps, seed {seed}");
    println!("exact      {}", s.expected);
    println!("optimal    {} ± {}", solved.mean, solved.std_error);
    println!("always-free {} ± {}", baseline.mean, baseline.std_error);
    Ok(())
}

fn evaluate(cli: &Cli, policy_path: &Path) -> Result<()> {
    let model = load(cli)?.spec;
    let lifted = build_lifted_mdp(&model)?;
    let file = File::open(policy_path).map_err(mfteam::Error::from)?;
    let policy = read_policy_csv(file, lifted.num_states())?;
    let values = evaluate_policy(&model, &lifted, &policy)?;
    write_policy_csv(
        lifted.space(),
        lifted.maps(),
        &policy,
        &values,
        out_file(cli, "evaluation.csv")?,
    )?;
    println!(
        "expected cost {}",
        expected_value(&model, lifted.space(), values.initial())
    );
    Ok(())
}

fn export_kernel(cli: &Cli) -> Result<()> {
    let model = load(cli)?.spec;
    let lifted = build_lifted_mdp(&model)?;
    for t in 0..lifted.table_count() {
        let suffix = if lifted.is_shared() {
            String::new()
        } else {
            format!("_stage{t}")
        };
        lifted.write_kernel_csv(t, out_file(cli, &format!("kernel{suffix}.csv"))?)?;
        lifted.write_cost_csv(t, out_file(cli, &format!("cost{suffix}.csv"))?)?;
    }
    println!(
        "{} table(s), {} mean-fields, {} maps",
        lifted.table_count(),
        lifted.num_states(),
        lifted.num_maps()
    );
    Ok(())
}

fn verify(corpus: Option<&Path>) -> Result<()> {
    let default = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/corpus"));
    let dir = corpus.unwrap_or(&default);
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(mfteam::Error::from)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("toml" | "cfg")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(mfteam::Error::InvalidModel {
            path: dir.display().to_string(),
            message: "no model files found".into(),
        });
    }
    let mut failures = 0;
    for path in &files {
        let name = path
            .file_name()
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        let model = load_model(path).with_context(|| name.clone())?.spec;
        for check in mfteam::oracle::verify_model(&model)? {
            let status = if check.passed { "ok  " } else { "FAIL" };
            println!("{status} {name} {}: {}", check.name, check.detail);
            if !check.passed {
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(VerifyFailed(failures).into());
    }
    Ok(())
}

fn figure_data(cli: &Cli) -> Result<()> {
    let seed = require_seed(cli)?;
    let model = load(cli)?.spec;
    if model.k() != 2 {
        bail!(mfteam::Error::Unsupported(format!(
            "figure data needs two local states, model has {}",
            model.k()
        )));
    }
    let lifted = build_lifted_mdp(&model)?;
    let s = solve(&model, &lifted, cli.tol, false)?;
    let n = model.n() as f64;
    let maps = lifted.maps();

    for x in 0..2 {
        let mut w = csv_writer(out_file(cli, &format!("policy_state{x}.csv"))?);
        w.write_record(["z0", "action"])?;
        for (z, field) in lifted.space().fields().iter().enumerate().rev() {
            let g = s.policy.map_at(0, z);
            w.write_record([
                fmt_fraction(field.count(0), n),
                maps.get(g)?.action(x).to_string(),
            ])?;
        }
        w.flush()?;
    }

    let mut w = csv_writer(out_file(cli, "value.csv")?);
    w.write_record(["z0", "value"])?;
    for (z, field) in lifted.space().fields().iter().enumerate().rev() {
        w.write_record([
            fmt_fraction(field.count(0), n),
            s.values.initial()[z].to_string(),
        ])?;
    }
    w.flush()?;

    let steps = cli.horizon.unwrap_or(100);
    let mut opts = SimOptions::new(seed, steps, 1);
    opts.record_paths = true;
    let run = simulate(&model, &lifted, SimStrategy::Policy(&s.policy), &opts)?;
    let mut w = csv_writer(out_file(cli, "sample_path.csv")?);
    w.write_record(["t", "z0", "map_index"])?;
    let path = &run.trajectories[0];
    for (t, z) in path.mean_fields.iter().enumerate() {
        w.write_record([
            t.to_string(),
            fmt_fraction(z.count(0), n),
            path.maps[t].to_string(),
        ])?;
    }
    w.flush()?;
    println!(
        "wrote policy_state0.csv, policy_state1.csv, sample_path.csv, value.csv to {}",
        cli.out.display()
    );
    Ok(())
}

fn csv_writer<W: std::io::Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

fn fmt_fraction(count: u32, n: f64) -> String {
    (f64::from(count) / n).to_string()
}
