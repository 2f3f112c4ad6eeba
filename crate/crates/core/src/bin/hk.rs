use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use heat_kernel::cli::{exit_code, run_experiment, Experiment, ExperimentConfig, RunOutcome};
use heat_kernel::Result;

#[derive(Parser)]
#[command(name = "hk", version, about = "Heat-kernel learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the heat kernel of the real line from uniform samples.
    Toy1d(RunArgs),
    /// Sample a 1-D Gaussian with plain and learned-kernel SVGD.
    SvgdGauss(RunArgs),
    /// Bayesian neural network regression with SVGD.
    SvgdBnn(RunArgs),
    /// Train a generator on the 8-Gaussian ring.
    Gan2d(RunArgs),
    /// Run the oracle and invariant checks.
    Validate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds to run.
    #[arg(long)]
    num_seeds: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn run(experiment: Experiment, args: &RunArgs) -> Result<Vec<RunOutcome>> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.num_seeds {
        cfg.num_seeds = n;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    run_experiment(&cfg, experiment, args.jobs)
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("HK_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let cli = Cli::parse();
    let (experiment, args) = match &cli.command {
        Command::Toy1d(a) => (Experiment::Toy1d, a),
        Command::SvgdGauss(a) => (Experiment::SvgdGauss, a),
        Command::SvgdBnn(a) => (Experiment::SvgdBnn, a),
        Command::Gan2d(a) => (Experiment::Gan2d, a),
        Command::Validate(a) => (Experiment::Validate, a),
    };
    let result = run(experiment, args);
    match &result {
        Ok(outs) => {
            for o in outs {
                if experiment == Experiment::Validate {
                    if let Ok(t) = std::fs::read_to_string(o.dir.join("validate.txt")) {
                        print!("{t}");
                    }
                }
                let status = if o.passed { "ok" } else { "failed checks" };
                println!("{} seed {}: {status}, artifacts in {}", experiment.tag(), o.manifest.seed, o.dir.display());
            }
        }
        Err(e) => eprintln!("hk {}: {e}", experiment.tag()),
    }
    ExitCode::from(exit_code(&result) as u8)
}
