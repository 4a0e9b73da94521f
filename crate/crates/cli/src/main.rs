use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqtransfer_cli::commands::{self, EvaluateArgs, GenSynthArgs, VerifyArgs};
use seqtransfer_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "seqtransfer",
    version,
    about = "Label-aware transfer learning for sequence labeling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target corpus pair.
    GenSynth {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = GenSynthArgs::default().n_source)]
        n_source: usize,
        /// Target sentences split between train and dev.
        #[arg(long, default_value_t = GenSynthArgs::default().n_target)]
        n_target: usize,
        #[arg(long, default_value_t = GenSynthArgs::default().target_dev_frac)]
        target_dev_frac: f64,
        #[arg(long, default_value_t = GenSynthArgs::default().n_target_test)]
        n_target_test: usize,
        #[arg(long, default_value_t = GenSynthArgs::default().n_types)]
        n_types: usize,
        #[arg(long, default_value_t = GenSynthArgs::default().vocab_size)]
        vocab_size: usize,
        #[arg(long, default_value_t = GenSynthArgs::default().shift_strength)]
        shift_strength: f64,
    },
    /// Train a model from a `key = value` config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` override, applied after the config file. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Span F1 of a model on a test file, with a paired significance test against a second model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Finite-difference gradient checks and the KL bound certificate.
    Verify {
        #[arg(long)]
        gradcheck: bool,
        #[arg(long)]
        bound: bool,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut err = io::stderr();
    match cli.command {
        Command::GenSynth {
            seed,
            out: dir,
            n_source,
            n_target,
            target_dev_frac,
            n_target_test,
            n_types,
            vocab_size,
            shift_strength,
        } => {
            let args = GenSynthArgs {
                seed,
                out: dir,
                n_source,
                n_target,
                target_dev_frac,
                n_target_test,
                n_types,
                vocab_size,
                shift_strength,
            };
            commands::gen_synth(&args, &mut out)?;
        }
        Command::Train {
            config,
            overrides,
            mode,
            seed,
            threads,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            cfg.apply_overrides(&overrides)?;
            if let Some(m) = mode {
                cfg.set("mode", &m)?;
            }
            if let Some(s) = seed {
                cfg.set("seed", &s.to_string())?;
            }
            if let Some(t) = threads {
                cfg.set("threads", &t.to_string())?;
            }
            commands::train_cmd(cfg, &mut out, &mut err)?;
        }
        Command::Evaluate {
            model,
            test,
            against,
            iterations,
            seed,
            threads,
        } => {
            let args = EvaluateArgs {
                model,
                test,
                second_model: against,
                iterations,
                seed,
                threads: threads.max(1),
            };
            commands::evaluate_cmd(&args, &mut out)?;
        }
        Command::Verify {
            gradcheck,
            bound,
            trials,
            seed,
        } => {
            let args = VerifyArgs {
                gradcheck,
                bound,
                trials,
                seed,
            };
            return Ok(commands::verify_cmd(&args, &mut out, &mut err)?);
        }
    }
    out.flush()?;
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
