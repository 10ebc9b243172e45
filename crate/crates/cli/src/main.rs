//! `sake`: ingest, serve, rollout, reward-replay, eval, grpo and demo.
//!
//! Machine-readable output is newline-delimited JSON on stdout. Diagnostics
//! go to stderr. Exit codes: 0 success, 1 usage or config error, 2 runtime
//! or backend error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sake_core::kg::TripletFormat;
use sake_core::rollout::Variant;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sake", version, about = "Knowledge-graph tools, rollouts, rewards and GRPO math")]
struct Cli {
    /// TOML config file. Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a triplet file and write a KG index.
    Ingest(IngestArgs),
    /// Run the HTTP tool server until interrupted.
    Serve(ServeArgs),
    /// Run rollouts for one question or a dataset file.
    Rollout(RolloutArgs),
    /// Score stored trajectories with the curriculum reward at a given step.
    RewardReplay(RewardReplayArgs),
    /// Accuracy and token statistics for trajectories against datasets.
    Eval(EvalArgs),
    /// Per-group GRPO objective reports for a trajectory batch.
    Grpo(GrpoArgs),
    /// Run one rollout and print it segment by segment.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "tsv")]
    format: TripletFormat,
    /// Also store entity vectors from the configured encoder.
    #[arg(long)]
    embed: bool,
}

/// Where the graph and entity vectors come from.
#[derive(Debug, Args)]
struct KgArgs {
    /// KG index (`.json`) or triplet file (`.tsv`, `.csv`).
    #[arg(long, env = "SAKE_KG_INDEX", value_name = "PATH")]
    kg: Option<PathBuf>,
    /// JSON vector table; replaces the configured encoder.
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PolicyArgs {
    /// Scripted policy file.
    #[arg(long, value_name = "PATH", conflicts_with = "policy_endpoint")]
    script: Option<PathBuf>,
    /// OpenAI-compatible completions base URL.
    #[arg(long, value_name = "URL", requires = "model")]
    policy_endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Debug, Args)]
struct RolloutOverrides {
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    max_tokens_per_turn: Option<usize>,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[arg(long, requires = "s2")]
    s1: Option<u64>,
    #[arg(long, requires = "s1")]
    s2: Option<u64>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "SAKE_BIND")]
    bind: Option<String>,
    #[arg(long, env = "SAKE_AUTH_TOKEN", hide_env_values = true)]
    auth_token: Option<String>,
    #[command(flatten)]
    kg: KgArgs,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Debug, Args)]
struct RolloutArgs {
    #[arg(long, required_unless_present = "batch", conflicts_with = "batch")]
    question: Option<String>,
    #[arg(long, requires = "question")]
    id: Option<String>,
    /// Dataset file; one rollout per item, ids taken from the items.
    #[arg(long, value_name = "PATH")]
    batch: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    kg: KgArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    rollout: RolloutOverrides,
}

#[derive(Debug, Args)]
struct RewardReplayArgs {
    #[arg(long, value_name = "PATH")]
    trajectories: PathBuf,
    /// Dataset supplying gold answers by trajectory id.
    #[arg(long, value_name = "PATH", required_unless_present = "gold")]
    dataset: Option<PathBuf>,
    /// One gold answer for every trajectory.
    #[arg(long, conflicts_with = "dataset")]
    gold: Option<String>,
    #[arg(long)]
    step: u64,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    trajectories: PathBuf,
    /// Repeat for several datasets; the weighted average pools them.
    #[arg(long, value_name = "PATH", required = true)]
    dataset: Vec<PathBuf>,
    /// Also write the report here as pretty JSON.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GrpoArgs {
    #[arg(long, value_name = "PATH")]
    trajectories: PathBuf,
    /// Log-prob records aligned line by line with the trajectories.
    #[arg(long, value_name = "PATH")]
    logprobs: PathBuf,
    #[arg(long)]
    clip_epsilon: Option<f64>,
    #[arg(long)]
    kl_beta: Option<f64>,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long)]
    question: String,
    /// Gold answer used for the reward line.
    #[arg(long)]
    gold: String,
    #[arg(long, default_value_t = 0)]
    step: u64,
    #[command(flatten)]
    kg: KgArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    rollout: RolloutOverrides,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
