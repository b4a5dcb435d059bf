mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fvn_core::corpus::DatasetMode;
use fvn_core::FvnError;

#[derive(Parser, Debug)]
#[command(name = "fvn", version, about = "Focused-variation controlled text generation")]
pub struct Cli {
    /// TOML file of `key = value` settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub mode: Option<DatasetMode>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, value_enum, global = true)]
    pub decode: Option<Decode>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Decode {
    Greedy,
    Sample,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse, delexicalize and split corpus files into JSON-lines dumps.
    Prepare {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Train a model, or resume one given `--checkpoint`.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Epoch log (JSON lines); defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Count code usage over the training data into the checkpoint.
    BuildCodes {
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Generate one text per condition.
    Generate {
        #[arg(long)]
        conditions: PathBuf,
        /// Optional JSON lines with delexicalized text and sampled codes.
        #[arg(long)]
        details: Option<PathBuf>,
    },
    /// Score hypotheses against blank-line-separated reference groups.
    Evaluate {
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// Conditions aligned with the hypotheses, for slot and style scores.
        #[arg(long)]
        conditions: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Report the most probable style codes with sample generations.
    InspectCodes {
        #[arg(long)]
        style: String,
        #[arg(long, default_value_t = 5)]
        top_m: usize,
        #[arg(long, default_value_t = 3)]
        per_code: usize,
        #[arg(long)]
        conditions: Option<PathBuf>,
    },
    /// Run the built-in gradient and oracle property suite.
    Selftest,
    /// Train the style classifier used by `evaluate`.
    TrainClassifier {
        #[arg(long)]
        train: PathBuf,
    },
}

pub enum CliError {
    Usage(String),
    Core(FvnError),
    Failed(String),
}

impl From<FvnError> for CliError {
    fn from(e: FvnError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(FvnError::Io(e))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(CliError::Usage(first_line(&e.to_string()).trim_start_matches("error: ").to_string())),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn first_line(s: &str) -> &str {
    s.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}

/// One line on stderr: `error kind=<kind> message=<json string>`.
fn report(e: CliError) -> ExitCode {
    let (kind, message, code) = match e {
        CliError::Usage(m) => ("usage", m, 2),
        CliError::Core(e) => (e.kind(), e.to_string(), 1),
        CliError::Failed(m) => ("failed", m, 1),
    };
    let message = serde_json::to_string(&message).expect("string serializes");
    eprintln!("error kind={kind} message={message}");
    ExitCode::from(code)
}
