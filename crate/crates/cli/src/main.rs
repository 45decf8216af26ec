mod commands;
mod config;
mod provenance;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gapflight::imitation::Setting;
use gapflight::mission::Mode;

/// Learning-based quadrotor gap flight: data, training, missions, fine-tuning.
#[derive(Debug, Parser)]
#[command(name = "gapflight", version)]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every random stream derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planner or controller imitation dataset.
    GenData(GenDataArgs),
    /// Train the planner or controller network on a dataset.
    Train(TrainArgs),
    /// Combine planner and controller checkpoints into a policy manifest.
    Assemble(AssembleArgs),
    /// Fly one gap mission and write trace, metrics and plot.
    Fly(FlyArgs),
    /// Fine-tune a policy on the flight reward.
    Finetune(FinetuneArgs),
    /// Fly all three modes over seeded scenarios and tabulate effort metrics.
    EvalCompare(EvalCompareArgs),
    /// Plot one or more loss curves.
    PlotLoss(PlotLossArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Planner,
    Controller,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RangeKind {
    Large,
    Short,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Trajectories (planner) or samples (controller).
    #[arg(long)]
    n: usize,
    /// Points per planner trajectory.
    #[arg(long)]
    points: Option<usize>,
    /// Controller sampling box.
    #[arg(long, value_enum, default_value_t = RangeKind::Short)]
    range: RangeKind,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    net: Kind,
    /// Dataset CSV written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Planner setting: A plain, B augmented, C normalized, D both.
    #[arg(long, default_value = "D", value_parser = parse_setting)]
    setting: Setting,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss curve CSV; defaults to `loss_curve.csv` next to the checkpoint.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AssembleArgs {
    #[arg(long)]
    planner: PathBuf,
    #[arg(long)]
    controller: PathBuf,
    /// Run the planner half on normalized inputs. Defaults to the setting
    /// recorded next to the planner checkpoint.
    #[arg(long)]
    normalize: Option<bool>,
    /// Manifest path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlyArgs {
    #[arg(long, value_parser = parse_mode, default_value = "TR")]
    mode: Mode,
    /// Policy manifest, required for E2E and RL.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Gap tilt override, degrees.
    #[arg(long)]
    tilt: Option<f64>,
    #[arg(long)]
    v_cross: Option<f64>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Policy manifest to start from.
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    /// Manifest path of the tuned policy.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reward curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalCompareArgs {
    /// Policy manifest for E2E.
    #[arg(long)]
    policy: PathBuf,
    /// Fine-tuned policy manifest for RL.
    #[arg(long)]
    rl_policy: PathBuf,
    #[arg(long, default_value_t = 5)]
    scenarios: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotLossArgs {
    /// `label=path` of a loss curve CSV; repeatable.
    #[arg(long = "curve", required = true)]
    curves: Vec<String>,
    /// Plot the train column instead of the test column.
    #[arg(long)]
    train: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_setting(s: &str) -> Result<Setting, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

/// Command failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    /// Numeric or training fault.
    Fault(String),
    /// Bad usage or missing input.
    Usage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Fault(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Fault(m) | Failure::Usage(m) => f.write_str(m),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::RunConfig::load(cli.config.as_deref())
        .map_err(Failure::Usage)
        .and_then(|cfg| {
            let ctx = commands::Ctx { cfg, seed: cli.seed };
            match cli.command {
                Command::GenData(a) => commands::gen_data(&ctx, a),
                Command::Train(a) => commands::train(&ctx, a),
                Command::Assemble(a) => commands::assemble(&ctx, a),
                Command::Fly(a) => commands::fly(&ctx, a),
                Command::Finetune(a) => commands::finetune(&ctx, a),
                Command::EvalCompare(a) => commands::eval_compare(&ctx, a),
                Command::PlotLoss(a) => commands::plot_loss(&ctx, a),
            }
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
