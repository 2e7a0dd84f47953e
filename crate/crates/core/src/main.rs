use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod cli;

use cli::commands;
use cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "tcna", version, about = "Multi-modal TCN action anticipation: training, evaluation and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each one overrides the config key of the same name.
#[derive(Args, Clone, Default)]
pub struct Common {
    /// `default`, `full`, or a `key = value` config file.
    #[arg(long, default_value = "default")]
    pub config: String,
    /// Dataset root holding `train/index.csv` and `val/index.csv`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for CSV artifacts and the summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; falls back to `TCNA_SEED`, then to the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub modality: Option<String>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub dtype: Option<String>,
    #[arg(long)]
    pub snippets: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/val dataset.
    SynthGen(#[command(flatten)] Common),
    /// Train one uni-modal branch.
    TrainBranch(#[command(flatten)] Common),
    /// Train fusion layers on three frozen branches.
    TrainFusion {
        #[command(flatten)]
        common: Common,
        /// Directory holding rgb.ckpt, flow.ckpt and obj.ckpt.
        #[arg(long)]
        branches: PathBuf,
    },
    /// Score a branch or fusion checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient suite.
    Gradcheck(#[command(flatten)] Common),
    /// TCN branch vs recurrent baseline speed comparison.
    Bench(#[command(flatten)] Common),
    /// Accuracy as a function of the observed snippet count.
    AblateObslen(#[command(flatten)] Common),
    /// Uni-modal branches against every fusion strategy.
    AblateFusion {
        #[command(flatten)]
        common: Common,
        /// Reuse trained branches instead of training them.
        #[arg(long)]
        branches: Option<PathBuf>,
    },
}

fn resolve(common: &Common, training_stage: commands::Stage) -> tcna::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    let env_seed = std::env::var("TCNA_SEED").ok();
    let seed = common.seed.map(|s| s.to_string()).or(env_seed);
    let (epochs_key, lr_key) = match training_stage {
        commands::Stage::Fusion => ("fusion_epochs", "fusion_lr"),
        commands::Stage::Branch => ("epochs", "lr"),
    };
    let flags = [
        ("seed", seed),
        ("modality", common.modality.clone()),
        ("strategy", common.strategy.clone()),
        (epochs_key, common.epochs.map(|v| v.to_string())),
        (lr_key, common.lr.map(|v| v.to_string())),
        ("batch", common.batch.map(|v| v.to_string())),
        ("dtype", common.dtype.clone()),
        ("snippets", common.snippets.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v).map_err(|e| tcna::Error::Config(format!("--{key}: {e}")))?;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> tcna::Result<()> {
    use commands::Stage::{Branch, Fusion};
    match cli.command {
        Command::SynthGen(c) => commands::synth_gen(&resolve(&c, Branch)?, &c),
        Command::TrainBranch(c) => commands::train_branch(&resolve(&c, Branch)?, &c),
        Command::TrainFusion { common, branches } => commands::train_fusion(&resolve(&common, Fusion)?, &common, &branches),
        Command::Evaluate { common, checkpoint } => commands::evaluate(&resolve(&common, Branch)?, &common, &checkpoint),
        Command::Gradcheck(c) => commands::gradcheck(&resolve(&c, Branch)?, &c),
        Command::Bench(c) => commands::bench(&resolve(&c, Branch)?, &c),
        Command::AblateObslen(c) => commands::ablate_obslen(&resolve(&c, Branch)?, &c),
        Command::AblateFusion { common, branches } => {
            commands::ablate_fusion(&resolve(&common, Branch)?, &common, branches.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
