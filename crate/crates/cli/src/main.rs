mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shapectl::config::DEFAULT_NAME;
use shapectl::Error;

#[derive(Parser, Debug)]
#[command(name = "shapectl", version, about = "Hybrid shape control for planar rack-driven continuum robots")]
pub struct Cli {
    /// JSON config file, or `default` for the built-in defaults.
    #[arg(long, global = true, default_value = DEFAULT_NAME)]
    pub config: String,
    /// Replaces `seeds.master`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replaces `paths.root`, the directory all artifacts go under.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the training dataset.
    GenData,
    /// Train the network (generating the dataset first if needed).
    Train,
    /// Track one difficulty target with one controller.
    Track(TrackArgs),
    /// Every controller on every difficulty, averaged over the evaluation seeds.
    Bench,
    /// Obstacle-avoidance session against a trace file or the scripted sweep.
    Avoid(AvoidArgs),
    /// Gate heatmap and near-neutral/smooth gate split along the gating trajectory.
    Gates,
    /// Run the live websocket service, or replay a recording.
    Serve(ServeArgs),
    /// Run the invariant suites.
    Validate,
}

#[derive(Args, Debug)]
pub struct TrackArgs {
    /// phy, pure-nn or hybrid.
    #[arg(long, default_value = "hybrid")]
    pub controller: String,
    /// easy, medium or extreme.
    #[arg(long, default_value = "extreme")]
    pub difficulty: String,
}

#[derive(Args, Debug)]
pub struct AvoidArgs {
    #[arg(long, default_value = "hybrid")]
    pub controller: String,
    /// CSV with columns t,x,y,radius; the scripted sweep when absent.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Seconds; defaults to the trace's last row plus two seconds.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "hybrid")]
    pub controller: String,
    /// Replaces `serve.port`; 0 picks a free port.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Obstacle schedule followed until an operator moves the obstacle.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Write every input and broadcast state as NDJSON.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Re-run a recording headlessly and check the states match.
    #[arg(long, conflicts_with = "record")]
    pub replay: Option<PathBuf>,
    /// Stop after this many ticks.
    #[arg(long)]
    pub max_ticks: Option<u64>,
    /// Wait for `start` instead of running from the first tick.
    #[arg(long)]
    pub paused: bool,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "invalid_input",
        Error::BoundViolation { .. } => "bound_violation",
        Error::NumericFault { .. } => "numeric_fault",
        Error::Usage(_) => "usage",
        Error::InfeasiblePlan(_) => "infeasible_plan",
        Error::Internal(_) => "internal",
        Error::Config(_) => "config",
        Error::CheckpointNotFound(_) => "checkpoint_not_found",
        Error::Diverged { .. } => "diverged",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::CheckpointNotFound(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            if code == 1 {
                eprintln!("{}", serde_json::json!({ "level": "error", "kind": "usage", "message": e.kind().to_string() }));
            }
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "level": "error", "kind": error_kind(&e), "message": e.to_string() }));
            ExitCode::from(exit_code(&e))
        }
    }
}
