//! Argument parsing and the process entry point.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::commands::{execute, Verb};
use crate::config::{env_overrides, RunConfig};
use crate::error::{ErrorReport, Result};
use crate::output::OutputDir;

#[derive(Debug, Parser)]
#[command(name = "depthfusion", version, about = "Depth-aware LiDAR-camera BEV fusion harness")]
pub struct Cli {
    /// TOML config; keys not set fall back to the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `desk`, `paper` or `far_heavy`.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output directory (default: the config's `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline on one scene and dump stages and detections.
    Run {
        #[arg(long)]
        scene_dir: Option<PathBuf>,
        /// Checkpoint stem, e.g. `out/checkpoint/model`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated stage names to dump (default: all).
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Toy-train on the seed's corpus; writes the loss trace and a checkpoint.
    Train,
    /// Finite-difference audit of every differentiable op and both fusion blocks.
    Gradcheck {
        /// Number of seeds (default: `experiment.seeds`).
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Points and pixels per object by depth bin.
    Stats,
    /// Image weight of the global fusion block per depth bin.
    AttnProfile {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train first and profile the result.
        #[arg(long)]
        train: bool,
    },
    /// Train a reference and a one-factor ablation per seed.
    Ablate {
        /// `dgf`, `dlf`, `depth` or `embed_<mode>` (default: `experiment.factor`).
        #[arg(long)]
        factor: Option<String>,
    },
    /// Depth matrix and its sinusoidal encoding.
    DumpDepth,
    /// Per-instance local features and their boxes.
    DumpLocals {
        #[arg(long)]
        scene_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    pub fn verb(self) -> Verb {
        match self {
            Command::Run { scene_dir, checkpoint, stages, threshold } => Verb::Run { scene_dir, checkpoint, stages, threshold },
            Command::Train => Verb::Train,
            Command::Gradcheck { seeds } => Verb::Gradcheck { seeds },
            Command::Stats => Verb::Stats,
            Command::AttnProfile { checkpoint, train } => Verb::AttnProfile { checkpoint, train },
            Command::Ablate { factor } => Verb::Ablate { factor },
            Command::DumpDepth => Verb::DumpDepth,
            Command::DumpLocals { scene_dir, checkpoint } => Verb::DumpLocals { scene_dir, checkpoint },
        }
    }
}

/// Resolves the config and output directory, then runs the verb.
pub fn dispatch(cli: Cli, env: &[(String, String)]) -> Result<PathBuf> {
    let mut env = env.to_vec();
    if let Some(seed) = cli.seed {
        env.push(("DEPTHFUSION_SEED".into(), seed.to_string()));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), cli.preset.as_deref(), &env)?;
    let root = cli.out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let out = OutputDir::create(&root)?;
    execute(&cli.command.verb(), &cfg, &out)?;
    Ok(root)
}

/// Prints one JSON status line on stdout and returns the exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let report = ErrorReport { error: "usage".into(), stage: None, message: e.render().to_string() };
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            return 2;
        }
    };
    match dispatch(cli, &env_overrides()) {
        Ok(root) => {
            println!("{}", serde_json::json!({ "status": "ok", "output_dir": root }));
            0
        }
        Err(e) => {
            println!("{}", serde_json::to_string(&e.report()).expect("report serializes"));
            1
        }
    }
}
