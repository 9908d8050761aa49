//! `cfan-vae`: dataset synthesis, training, evaluation and latent-space
//! analysis for conformal-factor-and-normal mesh autoencoders.

mod data;
mod latent;
mod manifest;
mod model;

use anyhow::Result;
use cfan::model::ModelError;
use cfan::tensor::TensorError;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "cfan-vae", version, about = "Disentangling mesh autoencoder pipeline")]
struct Cli {
    /// Output directory; every file a command writes goes here.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Random seed recorded in the run manifest.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model configuration (TOML) for commands that build a model.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known identity and pose factors.
    Synth(data::SynthArgs),
    /// Build and cache the operator hierarchy of a dataset.
    Precompute(data::PrecomputeArgs),
    /// Train a model.
    Train(model::TrainArgs),
    /// Reconstruction errors on a dataset split.
    Evaluate(model::EvaluateArgs),
    /// Write posterior means and ground-truth factors of a split.
    Embed(model::EmbedArgs),
    /// Decode a path between two meshes in latent space.
    Interpolate(latent::InterpolateArgs),
    /// Swap identity or pose between two meshes.
    Transfer(latent::TransferArgs),
    /// Sample new meshes with one factor held fixed.
    Generate(latent::GenerateArgs),
    /// Register a coordinate model's latents to a CFAN model's latents.
    Register(latent::RegisterArgs),
}

/// Shared options every command receives.
pub struct Global {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
}

impl Global {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out)?;
    let g = Global {
        out: cli.out,
        seed: cli.seed,
        config: cli.config,
    };
    match cli.command {
        Command::Synth(a) => data::synth(&g, a),
        Command::Precompute(a) => data::precompute(&g, a),
        Command::Train(a) => model::train(&g, a),
        Command::Evaluate(a) => model::evaluate(&g, a),
        Command::Embed(a) => model::embed(&g, a),
        Command::Interpolate(a) => latent::interpolate(&g, a),
        Command::Transfer(a) => latent::transfer(&g, a),
        Command::Generate(a) => latent::generate(&g, a),
        Command::Register(a) => latent::register(&g, a),
    }
}

/// 3 for numeric failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<ModelError>(),
            Some(ModelError::NonFiniteDetected { .. })
        ) || matches!(
            e.downcast_ref::<TensorError>(),
            Some(TensorError::NonFiniteDetected { .. })
        )
    });
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
