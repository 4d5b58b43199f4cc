mod commands;
mod logging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use form::{ErrorClass, FormError};

#[derive(Debug, Parser)]
#[command(name = "form", version, about = "Opportunistic hip-fracture risk pipeline")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Worker threads; the FORM_JOBS environment variable takes precedence.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort with images and ground truth.
    Synth(commands::SynthArgs),
    /// Crop femur regions from a dataset's images.
    Preprocess(commands::PreprocessArgs),
    /// Cross-validate one model configuration and write its report.
    Run(commands::RunArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<FormError>() {
            return match e.class() {
                ErrorClass::Validation => 2,
                ErrorClass::Numeric => 3,
                ErrorClass::Io => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init(cli.verbose);
    let jobs = match std::env::var("FORM_JOBS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => {
                eprintln!("error: FORM_JOBS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        },
        Err(_) => cli.jobs,
    };
    if let Some(n) = jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let ctx = commands::Context { workdir: cli.workdir, jobs };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Preprocess(a) => commands::preprocess(&ctx, a),
        Command::Run(a) => commands::run(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
