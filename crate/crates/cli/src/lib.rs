//! Command-line pipeline: synthesize or ingest clips, train the codec and the
//! denoiser, generate, evaluate and benchmark.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use suture_core::dataset::Bucket;
use suture_core::guidance::GuidanceMode;

pub use commands::{Command, Context, Layout};
pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};

/// Environment variable selecting the compute backend.
pub const BACKEND_VAR: &str = "SUTURE_BACKEND";

#[derive(Debug, Parser)]
#[command(name = "suture", version, about = "Desk-scale suturing video diffusion pipeline")]
pub struct Cli {
    /// TOML run configuration; omitted sections use defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact root directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// none, cfg or stg.
    #[arg(long, global = true)]
    pub guidance: Option<GuidanceMode>,
    #[arg(long, global = true)]
    pub scale: Option<f64>,
    /// Sampling steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Generation resolution as WxHxT.
    #[arg(long, global = true)]
    pub bucket: Option<Bucket>,
    #[arg(long, global = true)]
    pub caption: Option<String>,
    /// PNG to condition on (image-to-video).
    #[arg(long, global = true)]
    pub first_frame: Option<PathBuf>,
    /// Replace output produced under different settings.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Clone, Copy, Debug, Subcommand)]
pub enum CliCommand {
    /// Render synthetic clips for every class and write the manifest.
    SynthData,
    /// Cut annotated clips from a session frame directory.
    Ingest,
    /// Train the video codec on the manifest clips.
    TrainCodec,
    /// Train the denoiser (LoRA or full fine-tune).
    Train,
    /// Generate one clip from a caption and optional first frame.
    Generate,
    /// Reconstruction loss, latency and class adherence.
    Evaluate,
    /// Generation latency only.
    Bench,
}

impl From<CliCommand> for Command {
    fn from(c: CliCommand) -> Self {
        match c {
            CliCommand::SynthData => Command::SynthData,
            CliCommand::Ingest => Command::Ingest,
            CliCommand::TrainCodec => Command::TrainCodec,
            CliCommand::Train => Command::Train,
            CliCommand::Generate => Command::Generate,
            CliCommand::Evaluate => Command::Evaluate,
            CliCommand::Bench => Command::Bench,
        }
    }
}

pub fn check_backend(value: Option<&str>) -> Result<()> {
    match value {
        None | Some("") | Some("cpu") => Ok(()),
        Some(other) => Err(CliError::Backend(other.to_string())),
    }
}

/// Resolves the configuration, echoes it to stderr and runs the command.
pub fn run(cli: Cli) -> Result<()> {
    check_backend(std::env::var(BACKEND_VAR).ok().as_deref())?;
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        guidance: cli.guidance,
        scale: cli.scale,
        steps: cli.steps,
        bucket: cli.bucket,
        caption: cli.caption.clone(),
        first_frame: cli.first_frame.clone(),
    };
    let config = base.resolve(&overrides)?;
    eprintln!("# resolved configuration\n{}", config.to_toml());
    Context::new(config, cli.force).run(cli.command.into())
}
