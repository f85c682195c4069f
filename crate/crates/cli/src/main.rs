//! `varhor`: command-line driver for varying-horizon FBSDE experiments.

mod commands;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "varhor", version, about = "Varying-horizon controlled FBSDE toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON run configuration; the builtin `paper-example` run when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set control.init=2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; defaults to the config's `output` entry, then `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Forward Euler-Maruyama ensemble and mean state curves.
    Simulate(Common),
    /// Terminal time, case and the mean-constraint and h curves.
    Stopping(Common),
    /// Backward solution and the cost functional.
    Cost(Common),
    /// Adjoint processes p, k, q.
    Adjoint(Common),
    /// Maximum-principle margins over probe controls and time nodes.
    CheckSmp(Common),
    /// Analytic derivatives against finite differences along a direction.
    GradCheck(Common),
    /// Convergence table of the rho-moving systems.
    RhoTable(Common),
    /// Projected-gradient optimization from the configured initial control.
    Optimize(Common),
    /// Closed-form checks of the builtin `paper-example` problem.
    ExampleVerify(Common),
}

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad input: exit code 2.
    Validation { code: String, message: String },
    /// Numerical failure or failed verification: exit code 3.
    Numerical { code: String, message: String },
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Validation { code: "IoError".into(), message: format!("{}: {e}", path.display()) }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation { .. } => 2,
            CliError::Numerical { .. } => 3,
        }
    }

    fn report(&self) -> String {
        let (kind, code, message) = match self {
            CliError::Validation { code, message } => ("validation", code, message),
            CliError::Numerical { code, message } => ("numerical", code, message),
        };
        json!({"error": code, "kind": kind, "message": message, "exit_code": self.exit_code()}).to_string()
    }
}

impl From<varhor::Error> for CliError {
    fn from(e: varhor::Error) -> Self {
        let (code, message) = (e.code().to_string(), e.to_string());
        if e.is_validation() {
            CliError::Validation { code, message }
        } else {
            CliError::Numerical { code, message }
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("VARHOR_THREADS") else { return Ok(()) };
    let bad = || CliError::Validation { code: "InvalidEnvironment".into(), message: format!("VARHOR_THREADS must be a positive integer, got `{raw}`") };
    let n: usize = raw.trim().parse().map_err(|_| bad())?;
    if n == 0 {
        return Err(bad());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Numerical { code: "ThreadPool".into(), message: e.to_string() })
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    use commands as c;
    match cmd {
        Command::Simulate(a) => c::simulate(&a),
        Command::Stopping(a) => c::stopping(&a),
        Command::Cost(a) => c::cost(&a),
        Command::Adjoint(a) => c::adjoint(&a),
        Command::CheckSmp(a) => c::check_smp(&a),
        Command::GradCheck(a) => c::grad_check(&a),
        Command::RhoTable(a) => c::rho_table(&a),
        Command::Optimize(a) => c::optimize(&a),
        Command::ExampleVerify(a) => c::example_verify(&a),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, matching the validation code
    let cli = Cli::parse();
    match configure_threads().and_then(|_| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.exit_code())
        }
    }
}
