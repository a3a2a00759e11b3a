use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::time::Instant;

use obe_core::datasets::FactorDataset;
use obe_core::trainer::{train_from, training_stream, DataCursor, StepReport, TrainConfig, TrainLog, TrainState};
use obe_core::ObeError;
use serde::Serialize;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::run::{load_data, JsonLines, RunDir};

pub struct TrainOutcome {
    pub run: RunDir,
    pub state: TrainState,
    pub log: TrainLog,
    pub checkpoint: PathBuf,
}

#[derive(Serialize)]
struct LogRecord<'a> {
    event: &'static str,
    #[serde(flatten)]
    report: &'a StepReport,
}

#[derive(Serialize)]
struct Summary<'a> {
    run: String,
    iterations: u64,
    checkpoint: String,
    data_order: String,
    elapsed_secs: f64,
    last: Option<&'a StepReport>,
}

/// Hash of the first epoch of the training data order; equal hashes mean identical order.
pub fn data_order_fingerprint(config: &TrainConfig, data: &FactorDataset) -> Result<String> {
    let stream = training_stream(config, data, DataCursor::default())?;
    let batches = data.len().div_ceil(config.batch);
    let mut h = DefaultHasher::new();
    for batch in stream.take(batches) {
        batch.hash(&mut h);
    }
    Ok(format!("{:016x}", h.finish()))
}

/// Trains per `config`, writing the config echo, log, checkpoints and a summary.
///
/// With `resume`, continues from the newest checkpoint in the run directory.
pub fn train_run(config: &ExperimentConfig, resume: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let data = load_data(&config.data, config.train.spec.side)?;
    let run = RunDir::create(&config.out)?;
    let _lock = run.lock()?;

    let previous = if resume { checkpoint::latest(&run.checkpoints())? } else { None };
    let (state, mut log_file) = match previous {
        Some(path) => {
            let ckpt = checkpoint::load(&path)?;
            let same = TrainConfig {
                iters: config.train.iters,
                ..ckpt.config.train.clone()
            };
            if same != config.train {
                return Err(CliError::config(format!(
                    "train: settings differ from the checkpoint being resumed ({})",
                    path.display()
                )));
            }
            log::info!("resuming from {} at iteration {}", path.display(), ckpt.state.iteration);
            (ckpt.state, JsonLines::append(&run.log())?)
        }
        None => {
            for entry in fs::read_dir(run.checkpoints())? {
                let p = entry?.path();
                if p.extension().is_some_and(|e| e == "safetensors") {
                    fs::remove_file(p)?;
                }
            }
            (TrainState::new(&config.train)?, JsonLines::create(&run.log())?)
        }
    };
    run.write_config(config)?;

    let remaining = (config.train.iters as u64).saturating_sub(state.iteration) as usize;
    let progress_every = (remaining / 20).max(1);
    let started = Instant::now();
    let mut failure: Option<CliError> = None;
    let mut saved_at = None;
    let result = train_from(&config.train, state, &data, remaining, |state, report| {
        let mut step = || -> Result<()> {
            if state.iteration % config.log_every as u64 == 0 || state.iteration == config.train.iters as u64 {
                log_file.write(&LogRecord { event: "step", report })?;
            }
            if state.iteration % config.checkpoint_every as u64 == 0 {
                log_file.flush()?;
                checkpoint::save(&run.checkpoints().join(checkpoint::file_name(state.iteration)), config, state)?;
                saved_at = Some(state.iteration);
            }
            if state.iteration as usize % progress_every == 0 {
                log::info!(
                    "iter {} W={:.4} info={:.4} L_or={:.4}",
                    state.iteration,
                    report.wasserstein,
                    report.infer_info,
                    report.orthogonality
                );
            }
            Ok(())
        };
        step().map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            ObeError::Data(msg)
        })
    });
    let (state, log) = match (result, failure) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    log_file.flush()?;

    let path = run.checkpoints().join(checkpoint::file_name(state.iteration));
    if saved_at != Some(state.iteration) {
        checkpoint::save(&path, config, &state)?;
    }
    let summary = Summary {
        run: run.name(),
        iterations: state.iteration,
        checkpoint: path.display().to_string(),
        data_order: data_order_fingerprint(&config.train, &data)?,
        elapsed_secs: started.elapsed().as_secs_f64(),
        last: log.last(),
    };
    fs::write(run.reports().join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(TrainOutcome {
        run,
        state,
        log,
        checkpoint: path,
    })
}
