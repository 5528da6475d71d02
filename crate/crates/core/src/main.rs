use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::error;

use segkit::config::{load_config, DEVICE_ENV};
use segkit::train::{automate_grid, read_grid, run_test, run_training, segment_file, RunOptions, TrainError};

#[derive(Parser)]
#[command(name = "segkit", version, about = "Train and evaluate segmentation models on BIDS datasets")]
#[command(arg_required_else_help = true)]
#[command(after_help = format!("The compute device is read from the {DEVICE_ENV} environment variable."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a configuration file.
    Train {
        #[arg(short = 'c', long = "config")]
        config: PathBuf,
    },
    /// Evaluate a trained model on the test split.
    Test {
        #[arg(short = 'c', long = "config")]
        config: PathBuf,
        #[arg(short = 'm', long = "model")]
        model: PathBuf,
    },
    /// Segment a single NIfTI image.
    Segment {
        #[arg(short = 'i', long = "input")]
        input: PathBuf,
        #[arg(short = 'm', long = "model")]
        model: PathBuf,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Launch a grid of trainings over devices.
    Automate {
        #[arg(short = 'c', long = "config")]
        config: PathBuf,
        #[arg(short = 'g', long = "grid")]
        grid: PathBuf,
        /// Comma-separated device names.
        #[arg(short = 'd', long = "devices", value_delimiter = ',', required = true)]
        devices: Vec<String>,
    },
}

fn run(cmd: Command) -> Result<(), TrainError> {
    match cmd {
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let out = run_training(&cfg, &RunOptions::default())?;
            println!(
                "trained {} epochs, best validation dice {:.4} at epoch {}",
                out.history.rows.len(),
                out.best_dice,
                out.best_epoch
            );
        }
        Command::Test { config, model } => {
            let cfg = load_config(&config)?;
            let report = run_test(&cfg, &model)?;
            println!("mean dice {:.4} at threshold {}", report.mean_dice, report.threshold);
        }
        Command::Segment { input, model, output } => {
            segment_file(&input, &model, &output)?;
            println!("wrote {}", output.display());
        }
        Command::Automate { config, grid, devices } => {
            let cfg = load_config(&config)?;
            let grid = read_grid(&grid)?;
            let exe = std::env::current_exe().map_err(|source| TrainError::Io {
                path: PathBuf::from("segkit"),
                source,
            })?;
            let results = automate_grid(&cfg, &grid, &devices, &exe)?;
            let failed = results.iter().filter(|r| !r.ok).count();
            println!("{} runs, {} failed; summary in {}", results.len(), failed, cfg.output.path.join("grid_results.csv").display());
            if failed > 0 {
                return Err(TrainError::Data(format!("{failed} of {} runs failed", results.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
