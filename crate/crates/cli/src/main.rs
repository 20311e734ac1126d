//! `zsl`: build class prototypes, fit and evaluate zero-shot classifiers.
//!
//! Exit codes: 0 on success, 1 when a computation fails (e.g. a singular
//! system), 2 for invalid input or usage.

mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::SynthArgs;
use crate::config::{Flags, RunConfig};

#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "zsl", version, about = "Zero-shot classification with sentence-based class prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score word visualness from image bundles; writes visualness.json and a histogram.
    Visualness(Flags),
    /// Build one prototype per catalog class.
    Build(Flags),
    /// Fit a ridge model on seen-class features.
    Train(Flags),
    /// Top-k accuracy of a trained model on unseen-class features.
    Eval(Flags),
    /// Select hyperparameters on held-out seen classes and refit.
    Cv(Flags),
    /// Learn word attention for Def_attention prototypes.
    Attention(Flags),
    /// Write a synthetic dataset with a known generator.
    Synth(SynthArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<zsl_core::Error>() {
            return if e.is_input_error() { 2 } else { 1 };
        }
        if cause.is::<UsageError>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

/// The error and its causes, skipping causes already quoted by their parent.
fn message(err: &anyhow::Error) -> String {
    let mut msg = err.to_string();
    for cause in err.chain().skip(1) {
        let s = cause.to_string();
        if !msg.contains(&s) {
            msg = format!("{msg}: {s}");
        }
    }
    msg
}

fn init_threads(cfg: &RunConfig) -> anyhow::Result<()> {
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (flags, cmd): (&Flags, fn(&RunConfig) -> anyhow::Result<()>) = match &cli.command {
        Command::Visualness(f) => (f, commands::visualness),
        Command::Build(f) => (f, commands::build),
        Command::Train(f) => (f, commands::train),
        Command::Eval(f) => (f, commands::eval),
        Command::Cv(f) => (f, commands::cv),
        Command::Attention(f) => (f, commands::attention),
        Command::Synth(args) => return commands::synth(args),
    };
    let cfg = RunConfig::resolve(flags)?;
    init_threads(&cfg)?;
    cmd(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
