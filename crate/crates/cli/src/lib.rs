//! Command-line surface of the toolkit: `ttm gen-data | train | sample | eval | ablate`.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "ttm", version, about = "Text-to-music latent diffusion with dual text conditioning (toy scale)")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic caption/latent dataset
    GenData(commands::gen_data::GenDataArgs),
    /// Train a denoiser from a run configuration
    Train(commands::train::TrainArgs),
    /// Sample latents from a checkpoint
    Sample(commands::sample::SampleArgs),
    /// Score generated latents against a reference set
    Eval(commands::eval::EvalArgs),
    /// Train and compare the conditioning variants
    Ablate(commands::ablate::AblateArgs),
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => {
            let dir = commands::gen_data::run(a)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Train(a) => {
            commands::train::run(a)?;
        }
        Command::Sample(a) => {
            for p in commands::sample::run(a)? {
                println!("{}", p.display());
            }
        }
        Command::Eval(a) => {
            commands::eval::run(a)?;
        }
        Command::Ablate(a) => {
            commands::ablate::run(a)?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
