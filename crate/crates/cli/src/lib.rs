//! Command-line front end: `run`, `merge` and `inspect-gram`.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime abort,
//! 4 unreadable input or architecture mismatch, 5 singular merge system.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hfedatm_core::orchestrator::Mode;

pub mod commands;
pub mod config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{phase} failed: {source}")]
    Runtime {
        phase: String,
        #[source]
        source: hfedatm_core::Error,
    },
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error("merge system is singular: {0}")]
    Singular(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Runtime { .. } | CliError::Output { .. } => 3,
            CliError::Input(_) => 4,
            CliError::Singular(_) => 5,
        }
    }

    /// Classifies a core error raised during `phase`.
    pub fn from_core(phase: impl Into<String>, e: hfedatm_core::Error) -> Self {
        use hfedatm_core::Error as E;
        let phase = phase.into();
        match e {
            E::ArchitectureMismatch { .. } | E::Format(_) => CliError::Input(format!("{phase}: {e}")),
            E::Singular { .. } => CliError::Singular(format!("{phase}: {e}")),
            other => CliError::Runtime { phase, source: other },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hfedatm", version, about = "Hierarchical federated learning simulator with filter-aligned merging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the federation for every configured seed and mode.
    Run(RunArgs),
    /// Merge station checkpoints offline using their Gram sidecars.
    Merge(MergeArgs),
    /// Describe a Gram sidecar, or demonstrate that Grams hide their data.
    InspectGram(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Replace the configured seed list with this one seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Data heterogeneity λ (1 is IID, 0 is exclusive-domain).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Run only this aggregation mode.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// DP budget ε for Gram uploads; "inf" clips without noise.
    #[arg(long = "dp-eps")]
    pub dp_eps: Option<String>,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Global rounds, overriding `training.rounds`.
    #[arg(long)]
    pub rounds: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct MergeArgs {
    /// Station checkpoints; the first one is the alignment reference.
    #[arg(required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// One Gram sidecar per checkpoint, in the same order.
    #[arg(long, num_args = 1.., required = true)]
    pub grams: Vec<PathBuf>,
    #[arg(long, default_value_t = hfedatm_core::merge::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long = "lambda-ot", default_value_t = 0.05)]
    pub lambda_ot: f64,
    #[arg(long = "sinkhorn-iters", default_value_t = 25)]
    pub sinkhorn_iters: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Merge report path; defaults to the output path with `.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    /// Gram sidecar to describe.
    #[arg(required_unless_present = "demo_ambiguity")]
    pub path: Option<PathBuf>,
    #[arg(long)]
    pub demo_ambiguity: bool,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rows (samples) of each random activation matrix.
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    /// Columns (features) of each random activation matrix.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: hfedatm_core::Error| e.to_string())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(a) => commands::cmd_run(a, out).map(|_| ()),
        Command::Merge(a) => commands::cmd_merge(a, out).map(|_| ()),
        Command::InspectGram(a) => commands::cmd_inspect_gram(a, out).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let _ = writeln!(err, "  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}
