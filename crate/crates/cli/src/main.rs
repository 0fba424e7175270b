//! `wisp`: run scenario files through the perception and pricing stack.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wisp_core::scenario::{self, Scenario};

#[derive(Parser, Debug)]
#[command(name = "wisp", version, about = "CSI perception and diffusion pricing experiments")]
struct Cli {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long, global = true, default_value = "default_3rx")]
    scenario: String,
    /// Master seed; overrides the scenario's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving reports and artifacts.
    #[arg(long, global = true, env = "WISP_OUT_DIR", default_value = "wisp-out")]
    out_dir: PathBuf,
    /// Scenario override, `dotted.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize CSI for every receiver and write a binary dump.
    SimulateCsi,
    /// Estimate path counts, angles and delays, sweeping SNR and seeds.
    Estimate {
        /// Estimate a recorded dump instead of simulating.
        #[arg(long)]
        csi: Option<PathBuf>,
    },
    /// Localize the user, score links and build feature matrices.
    Smsp,
    /// Fit the pose baseline on a synthetic sweep of user positions.
    SkeletonFit,
    /// Predict keypoints for the scenario's query position.
    SkeletonPredict {
        /// Model file; defaults to the one written by `skeleton-fit`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Exhaustive optimal pricing, optionally swept over AP limits.
    IncentiveOracle,
    /// Train the diffusion pricing policy.
    TrainPolicy,
    /// Compare a trained policy with the oracle on held-out economies.
    EvalPolicy {
        /// Checkpoint; defaults to the one written by `train-policy`.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Run every stage in order.
    Pipeline,
    /// Print a bundled scenario.
    ShowScenario,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SimulateCsi => "simulate-csi",
            Command::Estimate { .. } => "estimate",
            Command::Smsp => "smsp",
            Command::SkeletonFit => "skeleton-fit",
            Command::SkeletonPredict { .. } => "skeleton-predict",
            Command::IncentiveOracle => "incentive-oracle",
            Command::TrainPolicy => "train-policy",
            Command::EvalPolicy { .. } => "eval-policy",
            Command::Pipeline => "pipeline",
            Command::ShowScenario => "show-scenario",
        }
    }
}

/// Failure class; decides the exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn json(&self) -> serde_json::Value {
        let (kind, message) = match self {
            CliError::Validation(m) => ("validation", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        serde_json::json!({ "error": { "kind": kind, "message": message } })
    }
}

impl From<wisp_core::Error> for CliError {
    fn from(e: wisp_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn load_scenario(cli: &Cli) -> Result<Scenario, CliError> {
    let text = match scenario::bundled(&cli.scenario) {
        Some(t) => t.to_string(),
        None => std::fs::read_to_string(&cli.scenario)
            .map_err(|e| CliError::Validation(format!("cannot read scenario `{}`: {e}", cli.scenario)))?,
    };
    let mut sc = Scenario::parse(&text, &cli.overrides).map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(seed) = cli.seed {
        sc.seed = seed;
    }
    Ok(sc)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let sc = load_scenario(cli)?;
    if let Command::ShowScenario = cli.command {
        print!("{}", sc.to_toml()?);
        return Ok(());
    }
    let ctx = commands::Context {
        scenario: sc,
        out_dir: cli.out_dir.clone(),
    };
    let report = match &cli.command {
        Command::SimulateCsi => commands::simulate_csi(&ctx)?,
        Command::Estimate { csi } => commands::estimate(&ctx, csi.as_deref())?,
        Command::Smsp => commands::smsp(&ctx)?,
        Command::SkeletonFit => commands::skeleton_fit(&ctx)?,
        Command::SkeletonPredict { model } => commands::skeleton_predict(&ctx, model.as_deref())?,
        Command::IncentiveOracle => commands::incentive_oracle(&ctx)?,
        Command::TrainPolicy => commands::train_policy(&ctx)?,
        Command::EvalPolicy { policy } => commands::eval_policy(&ctx, policy.as_deref())?,
        Command::Pipeline => commands::pipeline(&ctx)?,
        Command::ShowScenario => unreachable!("handled above"),
    };
    println!("{}", report.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut v = e.json();
            v["error"]["command"] = cli.command.name().into();
            eprintln!("{v}");
            ExitCode::from(e.code())
        }
    }
}
