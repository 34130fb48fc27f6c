use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use silm_cli::cmd::{bench, eval, gen, predict, train};
use silm_cli::error::{CliError, Result};
use silm_cli::Precision;
use silm_core::metrics::DEFAULT_TAU;

/// Map-free multi-agent trajectory prediction with keypoint intent.
#[derive(Debug, Parser)]
#[command(name = "silm", version)]
struct Cli {
    /// Seed for data generation and training (overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file: the synthetic spec for `gen`, the training config for `train`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene corpus as JSON Lines.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on labeled scenes and write a checkpoint plus a CSV log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Log path (default: the checkpoint path with `.log.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint's parameters and optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Free-running predictions for every scene.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against labeled scenes.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        /// Miss threshold on the best mode's final displacement, meters.
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Per-agent rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Forward-pass latency over a sweep of agent counts.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SWEEP)]
        agents: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// CSV output (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::invalid(format!("--threads: {e}")))?;
    }
    let config = cli.config.as_deref();
    match cli.command {
        Command::Gen { out } => {
            let n = gen::run(config, cli.seed.unwrap_or(0), &out)?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::Train { data, out, log, resume } => {
            let cfg = train::effective_config(config, cli.seed)?;
            println!(
                "config: {}",
                serde_json::to_string(&cfg).map_err(|e| CliError::invalid(e.to_string()))?
            );
            let summary = train::run(&train::TrainArgs {
                config,
                seed: cli.seed,
                data: &data,
                out: &out,
                log: log.as_deref(),
                resume: resume.as_deref(),
            })?;
            if let Some(r) = &summary.last {
                println!("{}", silm_core::train::LOG_HEADER);
                println!("{}", r.to_csv());
            }
            println!(
                "{} steps; checkpoint {}; log {}",
                summary.steps,
                out.display(),
                summary.log_path.display()
            );
        }
        Command::Predict { checkpoint, scenes, out } => {
            let n = predict::run(&checkpoint, &scenes, &out, cli.precision)?;
            println!("wrote predictions for {n} scenes to {}", out.display());
        }
        Command::Eval {
            predictions,
            scenes,
            tau,
            json,
            csv,
        } => {
            let report = eval::run(&predictions, &scenes, tau, json.as_deref(), csv.as_deref())?;
            print!("{}", report.to_table());
            if json.is_none() {
                let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Numeric(e.to_string()))?;
                println!("{text}");
            }
        }
        Command::Bench {
            checkpoint,
            agents,
            repeats,
            warmup,
            out,
        } => {
            let args = bench::BenchArgs {
                sweep: agents,
                repeats,
                warmup,
                seed: cli.seed.unwrap_or(0),
                precision: cli.precision,
            };
            let rows = bench::run(&checkpoint, &args, out.as_deref())?;
            if out.is_none() {
                print!("{}", bench::to_csv(&rows));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
