use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use subboost::data::SyntheticSpec;
use subboost_cli::commands::{self, BoundEvalOptions};
use subboost_cli::config::ExperimentConfig;
use subboost_cli::experiment::run_experiment;
use subboost_cli::{CliError, RUNS_DIR_ENV};

#[derive(Debug, Parser)]
#[command(name = "subboost", version, about = "Boosted ultra-low-parameter adapters")]
struct Cli {
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true, env = RUNS_DIR_ENV, default_value = "runs")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every arm of an experiment config.
    Run { config: PathBuf },
    /// Write a Gaussian-mixture classification CSV.
    GenData {
        /// Output CSV path.
        output: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 60_000)]
        n: usize,
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
    },
    /// Recompute rank measures from stored deltas and cross-check reports.
    RankAudit {
        /// Run directory or checkpoint file.
        path: PathBuf,
    },
    /// Evaluate the margin bound for a run directory.
    BoundEval {
        run_dir: PathBuf,
        #[arg(long, default_value_t = subboost::bounds::DEFAULT_DELTA)]
        delta: f64,
        #[arg(long, default_value_t = subboost::bounds::DEFAULT_GRID_POINTS)]
        grid_points: usize,
        /// Use this feature-norm bound instead of the run's.
        #[arg(long)]
        x: Option<f64>,
    },
    /// Group-normalized advantages for reward groups read from stdin.
    Advantage,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let stdout = io::stdout();
    match cli.command {
        Command::Run { config } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            for arm in run_experiment(&cfg, &cli.out)? {
                let s = &arm.summary;
                let mut line = format!(
                    "{}: {} rounds, failures {} -> {}, train acc {:.4} -> {:.4}",
                    arm.name,
                    s.rounds_run,
                    s.initial_failures,
                    s.final_failures,
                    s.initial_train_accuracy,
                    s.final_train_accuracy
                );
                if let Some(b) = &s.bound {
                    line.push_str(&format!(", bound {:.4} at theta {:.4}", b.bound_at_star, b.theta_star));
                }
                writeln!(stdout.lock(), "{line}")?;
            }
        }
        Command::GenData {
            output,
            classes,
            dim,
            n,
            separation,
            noise,
        } => {
            let spec = SyntheticSpec {
                classes,
                dim,
                n,
                separation,
                noise,
                seed: cli.seed.unwrap_or(0),
            };
            commands::gen_data(&spec, &output)?;
        }
        Command::RankAudit { path } => {
            let audit = commands::rank_audit(&path)?;
            commands::print_rank_audit(&audit, &mut stdout.lock())?;
            if !audit.mismatches.is_empty() {
                return Err(CliError::Failed(format!(
                    "{} stored values disagree with the recomputed deltas",
                    audit.mismatches.len()
                )));
            }
        }
        Command::BoundEval {
            run_dir,
            delta,
            grid_points,
            x,
        } => {
            let report = commands::bound_eval(&run_dir, &BoundEvalOptions { delta, grid_points, x })?;
            writeln!(stdout.lock(), "{}", commands::bound_summary(&report))?;
        }
        Command::Advantage => {
            let stdin = io::stdin();
            let mut out = io::BufWriter::new(stdout.lock());
            commands::advantage(&mut stdin.lock(), &mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("RUST_LOG").init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
