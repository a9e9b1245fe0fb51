mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lsi_core::config::RunConfig;
use lsi_core::LsiError;

use crate::run::Run;

/// Latent space imaging: learned single-pixel masks decoded through a
/// generative latent space.
#[derive(Parser, Debug)]
#[command(name = "lsi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// `section.key = value` config file; defaults fill missing keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set encoder.d=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory (default: `<paths.runs>/<timestamp>-<command>-seed<seed>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Render the synthetic labeled face set into `data.dir`.
    MakeDataset,
    /// Fit the decoder and inversion network as an autoencoder.
    Pretrain,
    /// Train masks and measurement encoder against the frozen decoder.
    Train,
    /// Report held-out metrics of a trained model.
    Evaluate,
    /// Reconstruct `data.image` from its simulated measurements.
    Reconstruct,
    /// Fourier single-pixel baseline at `fsi.budget` readings.
    Fsi,
    /// White-image calibration of the simulated detector.
    Calibrate,
    /// Adapt the encoder to sensed measurements.
    Finetune,
    /// Write predicted latents of the test split to CSV.
    ExportLatents,
    /// Write the binarized masks as PNGs and a checkpoint.
    ExportMasks,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::MakeDataset => "make-dataset",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Reconstruct => "reconstruct",
            Command::Fsi => "fsi",
            Command::Calibrate => "calibrate",
            Command::Finetune => "finetune",
            Command::ExportLatents => "export-latents",
            Command::ExportMasks => "export-masks",
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let run = Run::create(cfg, cli.command.name(), cli.common.out.as_deref())?;
    log::info!("{} -> {}", cli.command.name(), run.dir.display());
    match cli.command {
        Command::MakeDataset => commands::make_dataset(run),
        Command::Pretrain => commands::pretrain(run),
        Command::Train => commands::train(run),
        Command::Evaluate => commands::evaluate_cmd(run),
        Command::Reconstruct => commands::reconstruct(run),
        Command::Fsi => commands::fsi(run),
        Command::Calibrate => commands::calibrate(run),
        Command::Finetune => commands::finetune_cmd(run),
        Command::ExportLatents => commands::export_latents(run),
        Command::ExportMasks => commands::export_masks(run),
    }
}

/// 2 for configuration problems and missing inputs, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<LsiError>(),
            Some(LsiError::Config(_) | LsiError::Usage(_) | LsiError::MissingDependency { .. })
        )
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
