//! Command-line frontend: corpus generation, training, evaluation, gradient
//! checking, and sampler audits, each as one subcommand with a reproducible
//! effective-config artifact.

mod audit;
mod common;
mod eval;
mod gen;
mod gradcheck;
mod train;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser)]
#[command(name = "ambiseg", version, about = "Segmentation training on heterogeneously labeled corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct CommonArgs {
    /// Configuration file, flat key=value lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed key of the subcommand.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Extra key=value pairs applied on top of the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads for training batches.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-source corpus with a manifest.
    Gen(CommonArgs),
    /// Train a model on a corpus manifest.
    Train(CommonArgs),
    /// Score a checkpoint against a corpus with reference labels.
    Eval(CommonArgs),
    /// Compare analytic loss and network gradients with finite differences.
    Gradcheck(CommonArgs),
    /// Audit the sampling hierarchy for conditional uniformity.
    AuditSampler(CommonArgs),
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Gen(args) => gen::cmd_gen(&args),
        Command::Train(args) => train::cmd_train(&args),
        Command::Eval(args) => eval::cmd_eval(&args),
        Command::Gradcheck(args) => gradcheck::cmd_gradcheck(&args),
        Command::AuditSampler(args) => audit::cmd_audit_sampler(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                ambiseg::Error::NonFinite(_) => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            }
        }
    }
}
