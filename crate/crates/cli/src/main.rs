//! `simt`: generate synthetic noisy-label data, train a classifier with a
//! learned simplex transition matrix, evaluate checkpoints, and certify
//! gradients.
//!
//! Exit codes: 0 success, 1 failed gradient check or interrupted run,
//! 2 invalid input, 3 numerical failure during training.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use log::warn;
use simt_core::gradcheck::{LossTerm, DEFAULT_INSTANCES};

use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "simt", version, about = "SimT noisy-label experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write training and held-out datasets plus T_true.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: the config's `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's `data_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Warm up, extend and train; writes metrics.csv, simt.csv,
    /// weighting.csv and checkpoint.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training dataset (JSON Lines with a `.header.json` sidecar).
        #[arg(long)]
        data: PathBuf,
        /// Evaluation dataset (default: the training data).
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        eval_every: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps, leaving a checkpoint to resume from.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Print a checkpoint's metrics on a dataset as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare every analytic gradient with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        /// Test hook: corrupt one term's analytic gradient.
        #[arg(long, hide = true, value_parser = parse_term)]
        corrupt: Option<LossTerm>,
    },
}

fn parse_term(s: &str) -> Result<LossTerm, String> {
    LossTerm::parse(s).ok_or_else(|| format!("unknown loss term {s:?}"))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen { config, out, seed } => {
            let mut config = commands::load_config(&config)?;
            if let Some(seed) = seed {
                config.data_seed = seed;
            }
            let out = commands::out_dir(out, &config);
            commands::gen(&config, &out)
        }
        Command::Train {
            config,
            data,
            heldout,
            out,
            seed,
            eval_every,
            resume,
            max_steps,
        } => {
            let mut config = commands::load_config(&config)?;
            if let Some(seed) = seed {
                config.train.seed = seed;
            }
            if let Some(every) = eval_every {
                if every == 0 {
                    return Err(CliError::Invalid("--eval-every must be positive".into()));
                }
                config.eval_every = every;
            }
            let out = commands::out_dir(out, &config);
            let interrupted = Arc::new(AtomicBool::new(false));
            let flag = Arc::clone(&interrupted);
            if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
                warn!("cannot install interrupt handler: {e}");
            }
            commands::train(commands::TrainArgs {
                config: &config,
                data: &data,
                heldout: heldout.as_deref(),
                out: &out,
                resume: resume.as_deref(),
                max_steps,
                interrupted: &interrupted,
            })
            .map(|_| ())
        }
        Command::Eval { checkpoint, data } => {
            println!("{}", commands::eval(&checkpoint, &data)?);
            Ok(())
        }
        Command::Gradcheck {
            seed,
            instances,
            corrupt,
        } => {
            let report = commands::gradcheck(seed, instances, corrupt)?;
            for term in &report.terms {
                let verdict = if term.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
                println!(
                    "{:<7} instances {:>4}  max_rel_error {:.3e}  worst {:<13}  {verdict}",
                    term.term.name(),
                    term.instances,
                    term.max_rel_error,
                    term.worst_group,
                );
            }
            let failing = report.failing();
            if failing.is_empty() {
                Ok(())
            } else {
                Err(CliError::GradcheckFailed(failing.iter().map(|t| t.name()).collect()))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIMT_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_INVALID_INPUT } else { error::EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(error::EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
