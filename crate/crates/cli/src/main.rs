//! `cilda` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cilda_core::training::Mode;

/// Failure split by exit code: bad input (2) or a runtime failure (1).
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<cilda_core::Error> for CliError {
    fn from(e: cilda_core::Error) -> Self {
        use cilda_core::Error as E;
        match e {
            E::InvalidConfig { .. }
            | E::Parse { .. }
            | E::Data(_)
            | E::LabelOutOfRange { .. }
            | E::TokenOutOfRange { .. }
            | E::HeadMismatch(_)
            | E::BadMagic
            | E::VersionMismatch { .. }
            | E::Truncated(_)
            | E::Checksum { .. }
            | E::Manifest(_) => CliError::Input(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "cilda", version, about = "Distil transformer encoders with adversarial augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: cilda_core::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load) a teacher, then distil a student.
    Train(RunFlags),
    /// Score a checkpoint on a labelled TSV file; prints a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Label the report as out-of-domain.
        #[arg(long)]
        ood: bool,
    },
    /// Per-example KL(teacher || student) as CSV.
    Diagnose {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Softmax temperature; defaults to the student's training tau1.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Write the synthetic task described by a spec file as TSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump (original, masked, augmented) rows produced by a trained generator.
    Augment {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input TSV; defaults to the config's training set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(flags) => commands::train(&flags.config, &flags.overrides()),
        Command::Eval { checkpoint, data, ood } => commands::eval(&checkpoint, &data, ood),
        Command::Diagnose { teacher, student, data, out, tau } => {
            commands::diagnose(&teacher, &student, &data, &out, tau)
        }
        Command::GenData { config, out, seed } => commands::gen_data(&config, &out, seed),
        Command::Augment { run, checkpoint, data } => {
            commands::augment(&run.config, &run.overrides(), &checkpoint, data.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

impl RunFlags {
    fn overrides(&self) -> config::Overrides {
        config::Overrides { seed: self.seed, mode: self.mode, out: self.out.clone() }
    }
}
