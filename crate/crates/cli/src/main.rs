mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Failure;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "owis-lab", version, about = "Open-world instance segmentation training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate(Common),
    /// Train on the labeled samples.
    Train(Common),
    /// Train on labeled and unlabeled samples with a teacher model.
    TrainSemi(Common),
    /// Evaluate a checkpoint on a held-out set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Score the ground truth itself instead of a model.
        #[arg(long)]
        oracle_detections: bool,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Perturb one analytic gradient entry; the check must then fail.
        #[arg(long)]
        corrupt_gradient: bool,
    },
    /// Run a multi-seed trend experiment.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        which: Which,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration. Missing sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Incompleteness,
    Semi,
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?,
        None => "{}".to_string(),
    };
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(obj) = value.as_object_mut() {
        if let Some(dir) = &common.output_dir {
            obj.insert("output_dir".into(), dir.to_string_lossy().into_owned().into());
        }
        if let Some(seed) = common.seed {
            obj.insert("seed".into(), seed.into());
        }
    }
    let cfg = RunConfig::from_json(&value.to_string()).map_err(|e| Failure::Config(e.to_string()))?;
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate(c) => commands::generate(&load_config(&c)?),
        Command::Train(c) => commands::train(&load_config(&c)?),
        Command::TrainSemi(c) => commands::train_semi_cmd(&load_config(&c)?),
        Command::Eval { common, oracle_detections } => commands::eval(&load_config(&common)?, oracle_detections),
        Command::Gradcheck { common, corrupt_gradient } => {
            let mut cfg = load_config(&common)?;
            cfg.gradcheck.check.corrupt_gradient |= corrupt_gradient;
            commands::gradcheck(&cfg)
        }
        Command::Experiment { common, which } => {
            let cfg = load_config(&common)?;
            match which {
                Which::Incompleteness => commands::incompleteness(&cfg),
                Which::Semi => commands::semi(&cfg),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("owis-lab: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
