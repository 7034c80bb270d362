mod certify;
mod inputs;
mod learn;
mod verify;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Exit code for failed checks.
const EXIT_CHECK: u8 = 1;
/// Exit code for unusable input.
const EXIT_INPUT: u8 = 2;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Io(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "commitq", version, about = "Committed Q-learning under hard state aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Report the structural properties of an environment.
    Certify(certify::Args),
    /// Run the learning-curve experiment and write CSV.
    Learn(learn::Args),
    /// Run the theory checks; exits with 1 if any fails.
    Verify(verify::Args),
    /// Write an environment in the commitq-env text format.
    ExportEnv(ExportArgs),
}

#[derive(clap::Args)]
struct ExportArgs {
    /// Zoo reference (e.g. `corridor:k=5`) or environment file.
    #[arg(long)]
    env: String,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Writes `text` to `out`, or stdout when `out` is `None`.
pub fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Certify(a) => certify::run(&a).map(|_| true),
        Command::Learn(a) => learn::run(&a).map(|_| true),
        Command::Verify(a) => verify::run(&a),
        Command::ExportEnv(a) => inputs::load_env(&a.env)
            .and_then(|l| emit(a.out.as_deref(), &commitq::format::write_env(&l.env)))
            .map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK),
        Err(e) => {
            eprintln!("commitq: {e}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
