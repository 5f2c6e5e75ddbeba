//! The `lava` command-line driver.
//!
//! Every subcommand reads one [`config::RunConfig`], writes its outputs and a
//! `manifest-<command>.json` into the output directory, and prints a JSON
//! summary on stdout. Logs go to stderr.
//!
//! Exit codes: 0 success, 1 bad input (usage, config, data validation),
//! 2 runtime failure (I/O, network, authentication).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod manifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] lava_core::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lava", version, about = "Verbal-autopsy cause-of-death pipeline")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed (default 42).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override `dotted.key=value`; the value is parsed as JSON when
    /// possible. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-site cohort with embeddings.
    Synth,
    /// Predict causes with the chat-completion model (cached).
    PredictLlm,
    /// Fit the embedding logistic regression on all labeled records.
    TrainEmbed,
    /// Apply a trained embedding model.
    PredictEmbed,
    /// Fit calibration weights on labeled ranked predictions and apply them.
    Calibrate,
    /// Fit weighted-ensemble weights over prediction files and apply them.
    Ensemble,
    /// Run the leave-one-site-out experiment.
    Evaluate,
    /// Render tables from a finished evaluation.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::PredictLlm => "predict-llm",
            Command::TrainEmbed => "train-embed",
            Command::PredictEmbed => "predict-embed",
            Command::Calibrate => "calibrate",
            Command::Ensemble => "ensemble",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
        }
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &argv) {
        Ok(summary) => {
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .try_init();
}

pub fn execute(cli: &Cli, argv: &[String]) -> Result<serde_json::Value, CliError> {
    let config = config::load(cli.config.as_deref(), &cli.set, cli.seed, cli.out.as_deref())?;
    let mut manifest = manifest::Manifest::new(cli.command.name(), argv, &config);
    if let Some(p) = &cli.config {
        manifest.input(p)?;
    }
    std::fs::create_dir_all(&config.out).map_err(|e| CliError::io(&config.out, e))?;
    let mut summary = commands::dispatch(cli.command, &config, &mut manifest)?;
    let path = manifest.write(&config.out)?;
    summary["manifest"] = serde_json::Value::String(display(&path));
    Ok(summary)
}

pub(crate) fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one_and_help_exits_zero() {
        assert_eq!(run(["lava", "--bogus", "synth"]), 1);
        assert_eq!(run(["lava", "frobnicate"]), 1);
        assert_eq!(run(["lava"]), 1);
        assert_eq!(run(["lava", "--help"]), 0);
        assert_eq!(run(["lava", "--version"]), 0);
    }

    #[test]
    fn exit_code_mapping() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(lava_core::Error::Validation("x".into())).exit_code(), 1);
        assert_eq!(CliError::Core(lava_core::Error::MissingApiKey { var: "K".into() }).exit_code(), 2);
        assert_eq!(CliError::io("p", std::io::Error::other("x")).exit_code(), 2);
    }
}
