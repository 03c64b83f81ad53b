use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use shelfpick::commands::{self, PolicyArg};
use shelfpick::config::{Config, CONFIG_ENV};
use shelfpick::service::{self, AppState};
use shelfpick_core::dataset::read_dataset;
use shelfpick_core::eval::EvalMode;
use shelfpick_core::planner::PlanMode;

#[derive(Parser)]
#[command(name = "shelfpick", version, about = "Collapse-aware bimanual shelf picking")]
struct Cli {
    /// JSON config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Safest,
    Fixed,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled dataset file.
    Gen {
        #[arg(long, default_value_t = 2000)]
        scenes: usize,
        #[arg(long, default_value_t = 1)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a dataset file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one dataset record.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        record: usize,
        /// Writes the classified label image (codes 0..3) as PGM.
        #[arg(long)]
        label_out: Option<PathBuf>,
    },
    /// Plan on a generated scene.
    Plan {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "safest")]
        mode: ModeArg,
        /// Extract cluster for fixed mode.
        #[arg(long)]
        extract: Option<usize>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Pixel metrics of a checkpoint on held-out records.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        limit: usize,
    },
    /// Closed-loop success rate over generated scenes.
    Closedloop {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, value_enum, default_value = "safest")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "oracle")]
        predictor: PolicyArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Run the HTTP session service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Persist sessions as JSON snapshots here.
        #[arg(long)]
        snapshot_dir: Option<PathBuf>,
    },
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let config = Config::resolve(cli.config.as_deref())?;
    let quiet = cli.quiet;
    match cli.command {
        Command::Gen { scenes, pairs, seed, out } => {
            print_json(&commands::gen(&config, scenes, pairs, seed, &out, quiet)?)?;
        }
        Command::Train { data, epochs, seed, out } => {
            let records = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            let mut training = config.training.clone();
            training.epochs = epochs.unwrap_or(training.epochs);
            training.seed = seed.unwrap_or(training.seed);
            let (ckpt, summary) = commands::train_checkpoint(&config, &records, &training, quiet)?;
            ckpt.save(&out)?;
            print_json(&summary)?;
        }
        Command::Infer { ckpt, data, record, label_out } => {
            let predictor = commands::load_predictor(&ckpt)?;
            let records = read_dataset(&data)?;
            let report = commands::infer(&predictor, &records, record, config.planner.threshold, label_out.as_deref())?;
            print_json(&report)?;
        }
        Command::Plan { seed, mode, extract, ckpt } => {
            let mode = match (mode, extract) {
                (ModeArg::Safest, _) => PlanMode::Safest,
                (ModeArg::Fixed, Some(e)) => PlanMode::FixedTarget(e),
                (ModeArg::Fixed, None) => anyhow::bail!("fixed mode needs --extract"),
            };
            print_json(&commands::plan(config, seed, mode, ckpt.as_deref())?)?;
        }
        Command::Eval { ckpt, data, limit } => {
            let predictor = commands::load_predictor(&ckpt)?;
            print_json(&commands::eval(&predictor, &data, config.planner.threshold, limit)?)?;
        }
        Command::Closedloop { trials, mode, predictor, seed, ckpt } => {
            let learned = ckpt.as_deref().map(commands::load_predictor).transpose()?;
            let mode = match mode {
                ModeArg::Safest => EvalMode::Safest,
                ModeArg::Fixed => EvalMode::FixedTarget,
            };
            let stats = commands::closedloop(&config, trials, mode, predictor, learned.as_ref(), seed, quiet)?;
            print_json(&stats)?;
        }
        Command::Serve { addr, ckpt, snapshot_dir } => {
            let mut state = AppState::new(config);
            if let Some(p) = &ckpt {
                state = state.with_checkpoint(p)?;
            }
            if let Some(dir) = &snapshot_dir {
                state = state.with_snapshots(dir)?;
            }
            tokio::runtime::Runtime::new()?.block_on(service::serve(&addr, state))?;
        }
    }
    Ok(())
}
