//! `s3c`: generate data, run protocols, re-evaluate checkpoints, compare runs.

mod manifest;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use s3c::data::Variant;
use s3c::trainer::Ablation;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_ABORT: u8 = 4;
pub const EXIT_NO_METRICS: u8 = 5;

/// Few-shot class-incremental learning with self-supervised stochastic
/// classifiers.
///
/// Settings are resolved in three layers: built-in defaults, then the
/// `--config` file, then command-line flags (`--seed`, `--variant`,
/// `--ablation`, `--set key=value`). Later layers win.
#[derive(Parser, Debug)]
#[command(name = "s3c", version, propagate_version = true)]
struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// A `key = value` file of protocol and training settings.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output file (gen-data, report) or run directory (run, eval).
    #[arg(short, long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with class embeddings.
    GenData(GenDataArgs),
    /// Train the base session and every incremental session, evaluating
    /// after each one.
    Run(RunArgs),
    /// Re-evaluate the final checkpoints of a run directory.
    Eval(EvalArgs),
    /// Compare the metrics of one or more run directories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Training images per class.
    #[arg(long, default_value_t = 50)]
    train: usize,
    /// Test images per class.
    #[arg(long, default_value_t = 20)]
    test: usize,
    /// Image side length.
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 12)]
    latent_dim: usize,
    /// Within-class spread of the latent codes.
    #[arg(long, default_value_t = 0.6)]
    noise: f64,
    /// Strength of the orientation cue.
    #[arg(long, default_value_t = 1.0)]
    cue: f64,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset file written by `gen-data`.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Protocol variant: standard, im (imbalanced shots) or lb (fewer base
    /// classes).
    #[arg(long)]
    variant: Option<Variant>,
    /// s3c, selfsup-linear, linear-head or no-selfsup.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Override one setting; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory holding checkpoints and `config.txt`.
    run: PathBuf,
    /// Dataset file; defaults to the one recorded in the manifest.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories to compare, one column each.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Emit CSV instead of plain-text tables.
    #[arg(long)]
    csv: bool,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<s3c::Error> for Failure {
    fn from(e: s3c::Error) -> Self {
        let code = match &e {
            s3c::Error::Io(_) | s3c::Error::Format { .. } => EXIT_IO,
            s3c::Error::TrainingAborted { .. } => EXIT_ABORT,
            _ => EXIT_USAGE,
        };
        Self::new(code, e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::GenData(args) => {
            let Some(out) = &cli.out else {
                Cli::command()
                    .error(
                        clap::error::ErrorKind::MissingRequiredArgument,
                        "gen-data needs an output file: -o <PATH>",
                    )
                    .exit();
            };
            gen_data(args, cli.seed.unwrap_or(0), out)
        }
        Command::Run(args) => {
            let Some(out) = &cli.out else {
                Cli::command()
                    .error(
                        clap::error::ErrorKind::MissingRequiredArgument,
                        "run needs a run directory: -o <PATH>",
                    )
                    .exit();
            };
            run::run(&cli, args, out)
        }
        Command::Eval(args) => run::eval(args, cli.out.as_deref()),
        Command::Report(args) => run::report(args, cli.out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(args: &GenDataArgs, seed: u64, out: &std::path::Path) -> Result<(), Failure> {
    use s3c::data::{generate_synthetic, save_dataset, GeneratorConfig};
    let cfg = GeneratorConfig {
        classes: args.classes,
        train_per_class: args.train,
        test_per_class: args.test,
        size: args.size,
        channels: args.channels,
        latent_dim: args.latent_dim,
        noise: args.noise,
        cue: args.cue,
    };
    let ds = generate_synthetic(&cfg, &mut s3c::numerics::Rng::new(seed))?;
    save_dataset(&ds, out)?;
    println!(
        "wrote {}: {} classes, {} samples ({} train, {} test), {}x{}x{} images, {}-d embeddings",
        out.display(),
        ds.class_count,
        ds.sample_count(),
        ds.train.len(),
        ds.test.len(),
        ds.channels,
        ds.size,
        ds.size,
        ds.embeddings.dim(),
    );
    Ok(())
}
