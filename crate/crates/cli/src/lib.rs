//! Config-driven experiment runner.
//!
//! Every run owns one output directory:
//! `config.toml` (the resolved config), `log.jsonl`, `checkpoints/`,
//! `figures/` and `reports/`.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod figures;
pub mod plot;
pub mod run;
pub mod train;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use obe_core::metrics::MetricKind;
use obe_core::trainer::RepresentationSource;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "obe", version, about = "Train and evaluate OBE-regularized InfoGAN models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config file; omitted keys fall back to the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set weights.lambda=0.5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("out={}", toml_string(&out.display().to_string())));
        }
        if let Some(seed) = self.seed {
            overrides.push(format!("train.seed={seed}"));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint with disentanglement and quality metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<MetricKind>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Code readout: `auto`, `encoder` or `obe`.
        #[arg(long)]
        representation: Option<RepresentationSource>,
    },
    /// Image grids sweeping one code dimension at a time.
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Selected expansion coefficients while one code dimension sweeps [-1, 1].
    Curves {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Swept dimension; all dimensions when omitted.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the full model and its three ablations.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training seeds shared by every variant.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        train_seeds: Vec<u64>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let config = config.resolve()?;
            let out = train::train_run(&config, resume)?;
            println!(
                "trained {} iterations; checkpoint {}",
                out.state.iteration,
                out.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            metrics,
            seeds,
            out,
            representation,
        } => {
            let options = eval::EvalOptions {
                metrics,
                seeds,
                out,
                model_id: None,
                representation,
            };
            let outcome = eval::eval_run(&checkpoint, &options)?;
            print!("{}", outcome.table.render());
            for r in &outcome.reports {
                for s in &r.skipped {
                    println!("seed {}: {} skipped: {}", r.seed, s.metric, s.reason);
                }
            }
        }
        Command::Traverse {
            checkpoint,
            dims,
            steps,
            rows,
            seed,
            out,
        } => {
            let outcome = figures::traverse_run(&checkpoint, dims.as_deref(), steps, rows, seed, out.as_deref())?;
            for (dim, _, path) in &outcome.grids {
                println!("dim {dim}: {}", path.display());
            }
        }
        Command::Curves {
            checkpoint,
            dim,
            steps,
            seed,
            out,
        } => {
            let dims = dim.map(|d| vec![d]);
            let outcome = figures::curves_run(&checkpoint, dims.as_deref(), steps, seed, out.as_deref())?;
            print!("{}", figures::render_selectivity(&outcome.summaries));
        }
        Command::Ablate { config, train_seeds } => {
            let config = config.resolve()?;
            let outcome = ablate::ablate_run(&config, &train_seeds)?;
            print!("{}", outcome.table.render());
            println!("report: {}", outcome.report.display());
        }
    }
    Ok(())
}
