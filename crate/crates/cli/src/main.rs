//! Command-line driver: generate data, train, evaluate, infer and plot.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use radarflow_core::pipeline::{
    run_eval, run_generate, run_infer, run_plot, run_training, Predictor, RunConfig,
};
use std::path::PathBuf;

/// Default data root when --data is omitted.
const DATA_ROOT_ENV: &str = "RADARFLOW_DATA_ROOT";

#[derive(Parser)]
#[command(name = "radarflow", version, about = "Radar scene-flow estimation on a synthetic rigid-body world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PredictorArg {
    Model,
    Zero,
    Gt,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default configuration to a TOML file
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic dataset described by the config
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-1 detector proxy plus stage-2 scene-flow training
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or a trivial predictor) on a split
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value_t = PredictorArg::Model)]
        predictor: PredictorArg,
    },
    /// Write per-frame predicted flow files for a split
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Emit bird's-eye arrow-field figures (ground truth or inferred flow)
    Plot {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// directory produced by `infer`; omit to draw the ground truth
        #[arg(long)]
        flows: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn data_root(arg: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    if let Some(p) = arg {
        return Ok(p);
    }
    if let Ok(env) = std::env::var(DATA_ROOT_ENV) {
        return Ok(PathBuf::from(env));
    }
    bail!("no --data given and {DATA_ROOT_ENV} is not set");
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::InitConfig { out } => {
            let cfg = RunConfig::desk_default();
            cfg.save(&out).context("writing default config")?;
            println!("wrote default config to {}", out.display());
        }
        Command::Generate { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let manifest = run_generate(&cfg, &out)?;
            println!(
                "generated {} sequences ({} train / {} test) under {}",
                manifest.sequences.len(),
                manifest.split("train").len(),
                manifest.split("test").len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let root = data_root(data)?;
            let outcome = run_training(&cfg, &root, &out)?;
            println!(
                "trained {} steps, final loss {:.6}; checkpoint at {}",
                outcome.steps_run,
                outcome.final_loss,
                outcome.checkpoint_path.display()
            );
        }
        Command::Eval { config, checkpoint, data, report, split, predictor } => {
            let cfg = RunConfig::load(&config)?;
            let root = data_root(data)?;
            let predictor = match predictor {
                PredictorArg::Model => Predictor::Model,
                PredictorArg::Zero => Predictor::ZeroFlow,
                PredictorArg::Gt => Predictor::GroundTruth,
            };
            if matches!(predictor, Predictor::Model) && checkpoint.is_none() {
                bail!("--checkpoint is required with the model predictor");
            }
            let rep = run_eval(
                &cfg,
                &root,
                checkpoint.as_deref(),
                &split,
                predictor,
                Some(&report),
            )?;
            println!("{}", rep.to_csv());
            println!("reports written to {}", report.display());
        }
        Command::Infer { config, checkpoint, data, out, split } => {
            let cfg = RunConfig::load(&config)?;
            let root = data_root(data)?;
            let n = run_infer(&cfg, &root, &checkpoint, &split, &out)?;
            println!("wrote {n} flow files under {}", out.display());
        }
        Command::Plot { config, data, flows, out, split } => {
            let cfg = RunConfig::load(&config)?;
            let root = data_root(data)?;
            let n = run_plot(&cfg, &root, flows.as_deref(), &split, &out)?;
            println!("wrote {n} figures under {}", out.display());
        }
    }
    Ok(())
}
