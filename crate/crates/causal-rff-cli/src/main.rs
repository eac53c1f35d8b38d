use std::path::PathBuf;
use std::process::ExitCode;

use causal_rff_cli::bounds::{cmd_bounds, parse_mode, BoundsParams};
use causal_rff_cli::config::{load_or_default, TransportChoice};
use causal_rff_cli::evaluate::{cmd_aggregate, cmd_evaluate};
use causal_rff_cli::generate::cmd_generate;
use causal_rff_cli::train::cmd_train;
use causal_rff_cli::{CliError, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

fn default_config_help() -> String {
    let config = causal_rff_cli::config::ExperimentConfig::default();
    format!(
        "Exit codes: 0 success, 1 invalid config/flags/input data, 2 runtime failure.\n\n\
         Default config (override any subset via --config FILE.json):\n{}",
        serde_json::to_string_pretty(&config).expect("default config serializes")
    )
}

#[derive(Parser)]
#[command(
    name = "causal-rff",
    version,
    about = "Federated causal effect experiments: generate benchmarks, train, evaluate, tabulate bounds",
    after_long_help = default_config_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic multi-source benchmark and write it as CSV files
    /// plus a manifest.
    Generate {
        /// Experiment config JSON; defaults apply where omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replaces every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the benchmark files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run federated training over a generated benchmark directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, losses, and factors.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's transport.
        #[arg(long, value_enum)]
        transport: Option<TransportChoice>,
        /// Listen address for the tcp transport.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Score a checkpoint on the test split, or aggregate metrics from
    /// repeated runs.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory written by `generate`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSVs from repeated runs to aggregate into mean and
        /// standard error; replaces the single-run evaluation.
        #[arg(long, num_args = 2.., value_name = "METRICS_CSV")]
        aggregate: Vec<PathBuf>,
    },
    /// Tabulate the minimax error bounds over a grid of record counts
    /// and transfer-factor values.
    Bounds {
        /// Number of sources.
        #[arg(long, default_value_t = 3)]
        m: usize,
        /// Random feature count B.
        #[arg(long, default_value_t = 100)]
        features: usize,
        /// Covariate dimension.
        #[arg(long, default_value_t = 30)]
        d_x: usize,
        /// Outcome noise scale.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Per-source record counts, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [10u64, 100, 1000, 10000])]
        n_grid: Vec<u64>,
        /// Transfer-factor values in [0, 1], comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
        lambda_grid: Vec<f64>,
        /// Observation family: continuous or binary.
        #[arg(long, default_value = "continuous")]
        mode: String,
        /// Directory for bounds.csv; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            let mut config = load_or_default(config.as_deref())?;
            config.apply_overrides(seed, None, None)?;
            let manifest = cmd_generate(&config, &out)?;
            println!(
                "wrote {} sources x {} records ({:?} benchmark, seed {}) to {}",
                manifest.m,
                manifest.n_per_source,
                manifest.kind,
                manifest.seed,
                out.display()
            );
            Ok(())
        }
        Command::Train { config, data, out, seed, transport, listen } => {
            let mut config = load_or_default(config.as_deref())?;
            config.apply_overrides(seed, transport, listen)?;
            let report = cmd_train(&config, &data, &out)?;
            match (report.first_total, report.final_total) {
                (Some(first), Some(last)) => println!(
                    "trained {} rounds; total loss {first:.4} -> {last:.4}; checkpoint at {}",
                    report.rounds_logged,
                    report.checkpoint.display()
                ),
                _ => println!(
                    "trained 0 rounds; checkpoint equals the initialization at {}",
                    report.checkpoint.display()
                ),
            }
            Ok(())
        }
        Command::Evaluate { config, checkpoint, data, out, seed, aggregate } => {
            if !aggregate.is_empty() {
                if checkpoint.is_some() || data.is_some() {
                    return Err(CliError::Validation(
                        "--aggregate replaces --checkpoint/--data".into(),
                    ));
                }
                let path = cmd_aggregate(&aggregate, &out)?;
                println!("aggregated {} replicates into {}", aggregate.len(), path.display());
                return Ok(());
            }
            let (checkpoint, data) = match (checkpoint, data) {
                (Some(c), Some(d)) => (c, d),
                _ => {
                    return Err(CliError::Validation(
                        "evaluate needs --checkpoint and --data (or --aggregate)".into(),
                    ))
                }
            };
            let mut config = load_or_default(config.as_deref())?;
            config.apply_overrides(seed, None, None)?;
            let report = cmd_evaluate(&config, &checkpoint, &data, &out)?;
            if let Some(path) = report.metrics {
                println!(
                    "metrics at {} (global ATE {:.4})",
                    path.display(),
                    report.global_ate.expect("metrics imply a global estimate")
                );
            } else if let Some(path) = report.predictions {
                println!("predictions at {}", path.display());
            }
            Ok(())
        }
        Command::Bounds { m, features, d_x, sigma, n_grid, lambda_grid, mode, out } => {
            let params = BoundsParams {
                m,
                num_features: features,
                d_x,
                sigma,
                n_grid,
                lambda_grid,
                mode: parse_mode(&mode)?,
            };
            let table = cmd_bounds(&params, out.as_deref())?;
            match out {
                Some(dir) => println!("bounds table at {}", dir.join("bounds.csv").display()),
                None => print!("{table}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let ok = matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = err.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
