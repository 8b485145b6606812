//! Batch CLI: simulate paths, estimate parameters from path CSVs, run
//! Monte Carlo experiment configs, and check the closed-form oracle
//! suite.
//!
//! Exit codes: 0 on success, 1 on validation/usage errors, 2 on runtime
//! failures.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use smallnoise::error::Error;
use smallnoise::flow::SamplingGrid;
use smallnoise::harness::{
    report, run_estimate, run_experiment, run_oracle_suite, EstimateConfig, ExperimentConfig,
};
use smallnoise::model::ModelSpec;
use smallnoise::simulate::{
    discretize, simulate_gillespie_sir, simulate_sde, write_jump_csv, write_path_csv,
    SeededRng, DEFAULT_SIM_SUBSTEPS,
};

#[derive(Parser)]
#[command(
    name = "smallnoise",
    version,
    about = "Minimum-contrast estimation for discretely observed small-noise diffusions"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one path (Euler-Maruyama; exact Gillespie for sir) and
    /// write it as CSV.
    Simulate(SimulateArgs),
    /// Estimate parameters from a path CSV; writes an estimation result
    /// as JSON.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo experiment config and write summary files.
    Mc(McArgs),
    /// Run the closed-form oracle suite and print one line per check.
    Oracle,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in model id: ou, cir, two_factor or sir.
    #[arg(long)]
    model: String,
    /// Drift parameters, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    alpha: Vec<f64>,
    /// Diffusion parameters, comma separated (defaults to alpha for sir).
    #[arg(long, value_delimiter = ',')]
    beta: Vec<f64>,
    /// Noise scale (SDE models).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Population size N (sir; noise scale becomes 1/sqrt(N)).
    #[arg(long)]
    population: Option<u64>,
    /// Initially infected count (sir).
    #[arg(long, default_value_t = 1)]
    m0: u64,
    /// Initial state, comma separated (derived from the population for sir).
    #[arg(long, value_delimiter = ',')]
    x0: Vec<f64>,
    /// Observation horizon T.
    #[arg(long = "t")]
    t_horizon: f64,
    /// Number of observation intervals.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replicate stream index.
    #[arg(long, default_value_t = 0)]
    stream: u64,
    #[arg(long, default_value_t = DEFAULT_SIM_SUBSTEPS)]
    sim_substeps: usize,
    /// Output path CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write the raw event record (sir only).
    #[arg(long)]
    jump_out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Input path CSV (header `t,x1,...,xp`).
    #[arg(long)]
    path: PathBuf,
    /// Estimation config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output JSON file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's replicate count.
    #[arg(long)]
    replicates: Option<usize>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Dimension(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.cmd {
        Cmd::Simulate(args) => simulate_cmd(args),
        Cmd::Estimate(args) => estimate_cmd(args),
        Cmd::Mc(args) => mc_cmd(args),
        Cmd::Oracle => oracle_cmd(),
    }
}

fn simulate_cmd(args: SimulateArgs) -> Result<ExitCode, Error> {
    let model = ModelSpec::by_id(&args.model)?;
    let grid = SamplingGrid::new(args.t_horizon, args.n)?;
    if args.model == "sir" {
        let n_total = args.population.ok_or_else(|| {
            Error::config("sir simulation needs --population (noise scale is 1/sqrt(N))")
        })?;
        if args.alpha.len() != 2 {
            return Err(Error::config("sir takes --alpha lambda,gamma"));
        }
        let traj = simulate_gillespie_sir(
            n_total,
            args.m0,
            args.alpha[0],
            args.alpha[1],
            args.t_horizon,
            SeededRng::new(args.seed, args.stream),
        )?;
        let path = discretize(&traj, &grid, true)?;
        write_path_csv(&path, fs::File::create(&args.out)?)?;
        if let Some(jump_out) = &args.jump_out {
            write_jump_csv(&traj, fs::File::create(jump_out)?)?;
        }
        println!(
            "wrote {} ({} events, attack fraction {:.3})",
            args.out.display(),
            traj.times.len(),
            traj.attack_fraction()
        );
    } else {
        let epsilon = args
            .epsilon
            .ok_or_else(|| Error::config("SDE simulation needs --epsilon"))?;
        if args.jump_out.is_some() {
            return Err(Error::config("--jump-out only applies to sir"));
        }
        let beta = if args.beta.is_empty() {
            return Err(Error::config("SDE simulation needs --beta"));
        } else {
            args.beta.clone()
        };
        if args.x0.len() != model.p {
            return Err(Error::config(format!(
                "--x0 needs {} coordinates for model '{}'",
                model.p, args.model
            )));
        }
        let path = simulate_sde(
            &model,
            &args.alpha,
            &beta,
            epsilon,
            &args.x0,
            &grid,
            args.sim_substeps,
            SeededRng::new(args.seed, args.stream),
        )?;
        write_path_csv(&path, fs::File::create(&args.out)?)?;
        println!("wrote {}", args.out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn estimate_cmd(args: EstimateArgs) -> Result<ExitCode, Error> {
    let cfg = EstimateConfig::from_json(&fs::read_to_string(&args.config)?)?;
    let model = ModelSpec::by_id(&cfg.model)?;
    let file = fs::File::open(&args.path)?;
    let path = smallnoise::simulate::read_path_csv(
        std::io::BufReader::new(file),
        model.p,
        cfg.epsilon,
    )?;
    let result = run_estimate(&cfg, &path)?;
    let json = serde_json::to_string_pretty(&result).map_err(Error::from)?;
    match &args.out {
        Some(out) => fs::write(out, json)?,
        None => println!("{json}"),
    }
    eprintln!(
        "estimate: alpha = {:?}{}, converged = {}",
        result.alpha_hat,
        result
            .beta_hat
            .as_ref()
            .map(|b| format!(", beta = {b:?}"))
            .unwrap_or_default(),
        result.optimizer.converged
    );
    Ok(ExitCode::SUCCESS)
}

fn mc_cmd(args: McArgs) -> Result<ExitCode, Error> {
    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::config(format!("could not size the worker pool: {e}")))?;
    }
    let mut config = ExperimentConfig::from_json(&fs::read_to_string(&args.config)?)?;
    if let Some(seed) = args.seed {
        config.base_seed = seed;
    }
    if let Some(reps) = args.replicates {
        config.replicates = reps;
    }
    if let Some(out) = &args.out {
        config.out_dir = Some(out.clone());
    }
    let out_dir = config
        .out_dir
        .clone()
        .ok_or_else(|| Error::config("no output directory (set out_dir or pass --out)"))?;
    let summary = run_experiment(&config)?;
    let paths = report(&summary, &out_dir)?;

    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{:<24} {:>5} {:<12} {:>12} {:>12} {:>10} {:>9}",
        "estimator", "n", "param", "mean", "sd", "coverage", "failures")?;
    for row in &summary.rows {
        writeln!(
            stdout,
            "{:<24} {:>5} {:<12} {:>12.6} {:>12.6} {:>10.3} {:>9}",
            row.kind.name(),
            row.n,
            row.param,
            row.mean,
            row.sd,
            row.coverage,
            row.failures
        )?;
    }
    writeln!(stdout, "reports under {}", paths.summary_csv.parent().unwrap().display())?;
    Ok(ExitCode::SUCCESS)
}

fn oracle_cmd() -> Result<ExitCode, Error> {
    let checks = run_oracle_suite()?;
    let mut all_ok = true;
    for check in &checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", check.name, check.detail);
        all_ok &= check.passed;
    }
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
