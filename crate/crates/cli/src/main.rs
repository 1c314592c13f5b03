//! `bgk-pinn`: config-driven experiment runner.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 a checked
//! property failed. Errors are printed to stderr as `{"code", "message"}`.

mod commands;
mod config;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use bgk_core::BgkError;

use crate::commands::{Outcome, Outputs};

#[derive(Parser, Debug)]
#[command(
    name = "bgk-pinn",
    version,
    about = "Weighted-loss BGK PINN experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Loss/accuracy sweep for an explicit counterexample family.
    Counterexample(Common),
    /// Integrability verdict for a weight function.
    CheckWeight(Common),
    /// Grid reference solution archive.
    Reference(Common),
    /// Train the ansatz and write a checkpoint plus loss history.
    Train(Common),
    /// Compare a checkpoint or archive with a reference archive.
    Evaluate(Common),
    /// Paired-seed training over a grid of weight parameters.
    Sweep(Common),
    /// Print the default configuration of a subcommand.
    Defaults { subcommand: String },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug)]
pub struct CliError {
    code: String,
    message: String,
}

impl CliError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("config", message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }
}

impl From<BgkError> for CliError {
    fn from(e: BgkError) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::json!({"code": self.code, "message": self.message});
        write!(f, "{v}")
    }
}

fn run_with<T, F>(c: &Common, seed_path: &[&str], body: F) -> Result<Outcome, CliError>
where
    T: Default + Serialize + DeserializeOwned,
    F: FnOnce(&T, &Outputs) -> Result<Outcome, CliError>,
{
    let cfg: T = config::resolve(c.config.as_deref(), &c.sets, c.seed.map(|s| (s, seed_path)))?;
    let out = Outputs::new(&c.out, &cfg)?;
    body(&cfg, &out)
}

fn defaults(name: &str) -> Result<serde_json::Value, CliError> {
    fn v<T: Default + Serialize>() -> serde_json::Value {
        serde_json::to_value(T::default()).expect("defaults serialize")
    }
    Ok(match name {
        "counterexample" => v::<config::CounterexampleConfig>(),
        "check-weight" => v::<config::CheckWeightConfig>(),
        "reference" => v::<config::ReferenceConfig>(),
        "train" => v::<config::TrainCmdConfig>(),
        "evaluate" => v::<config::EvaluateConfig>(),
        "sweep" => v::<config::SweepConfig>(),
        other => return Err(CliError::usage(format!("unknown subcommand `{other}`"))),
    })
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Counterexample(c) => run_with(&c, &[], commands::counterexample),
        Command::CheckWeight(c) => run_with(&c, &[], commands::check_weight),
        Command::Reference(c) => run_with(&c, &[], commands::reference),
        Command::Train(c) => run_with(&c, &["train", "seed"], commands::train_cmd),
        Command::Evaluate(c) => run_with(&c, &[], commands::evaluate_cmd),
        Command::Sweep(c) => run_with(&c, &["seeds"], commands::sweep),
        Command::Defaults { subcommand } => {
            let summary = defaults(&subcommand)?;
            Ok(Outcome {
                summary,
                passed: true,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::usage(e.to_string().trim_end()));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(o) => {
            let text = serde_json::to_string_pretty(&o.summary).expect("json value");
            // A closed pipe (e.g. `| head`) is not an error of the run.
            let _ = writeln!(std::io::stdout(), "{text}");
            if o.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!(
                    "{}",
                    CliError::new("assertion", "a checked property failed; see the summary")
                );
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
