mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands::CommandResult;
use crate::config::{Mode, RunConfig};

#[derive(Parser)]
#[command(name = "lfnet", version, about = "Latency-aware disease forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command. Precedence: built-in defaults, then the
/// config file, then --set overrides, then the named flags.
#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override a single config key (repeatable).
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[arg(long)]
    seed: Option<u64>,

    /// Experiment protocol.
    #[arg(long, value_enum)]
    mode: Option<Mode>,

    /// Forecast length in weeks.
    #[arg(long)]
    horizon: Option<usize>,

    /// Disable a model component (repeatable): no-slatt, no-tlatt, no-latt,
    /// no-align.
    #[arg(long, value_name = "NAME")]
    ablate: Vec<String>,

    /// Worker threads for data generation; everything else is single-threaded.
    #[arg(long, value_name = "N")]
    device_threads: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{pair}`"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(horizon) = self.horizon {
            cfg.horizon = horizon;
        }
        for name in &self.ablate {
            cfg.add_ablation(name)?;
        }
        if let Some(threads) = self.device_threads {
            cfg.device_threads = threads;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known dynamics.
    GenSynth {
        #[command(flatten)]
        common: Common,
        /// Directory receiving the dataset files and manifest.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Build the location graph and summarize it.
    BuildGraph {
        #[command(flatten)]
        common: Common,
        /// Optional directory for a report.json with the graph statistics.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train a model, keeping the lowest-train, lowest-val and last
    /// checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score a trained checkpoint on the test window.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file (.lfnet with its .json sidecar).
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Forecast the weeks after the end of the dataset from a checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the deployment refresh protocol: warm vs cold refresh vs
    /// full-history retraining.
    Update {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Audit analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Optional directory for a report.json with the audit numbers.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn run(command: &Command) -> Result<CommandResult> {
    match command {
        Command::GenSynth { common, out } => commands::gen_synth(&common.resolve()?, out),
        Command::BuildGraph { common, out } => {
            commands::build_graph(&common.resolve()?, out.as_deref())
        }
        Command::Train { common, out } => commands::train_command(&common.resolve()?, out),
        Command::Eval {
            common,
            checkpoint,
            out,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(path) = checkpoint {
                cfg.checkpoint = Some(path.clone());
            }
            commands::eval_command(&cfg, out)
        }
        Command::Predict {
            common,
            checkpoint,
            out,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(path) = checkpoint {
                cfg.checkpoint = Some(path.clone());
            }
            commands::predict_command(&cfg, out)
        }
        Command::Update { common, out } => commands::update_command(&common.resolve()?, out),
        Command::Gradcheck { common, out } => {
            commands::gradcheck_command(&common.resolve()?, out.as_deref())
        }
    }
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(result) => {
            println!("{}", result.summary);
            for path in &result.artifacts {
                println!("  wrote {}", path.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
