use std::fs;
use std::path::{Path, PathBuf};

use obe_core::metrics::{evaluate, model_representation, AggregateTable, MetricKind, MetricReport};
use obe_core::trainer::RepresentationSource;
use serde::Serialize;

use crate::checkpoint;
use crate::error::Result;
use crate::run::{load_data, JsonLines, RunDir};

pub struct EvalOutcome {
    pub reports: Vec<MetricReport>,
    pub table: AggregateTable,
    pub dir: PathBuf,
}

/// One line of `metrics.jsonl`: a single metric at a single seed.
#[derive(Serialize)]
struct MetricRecord<'a> {
    model_id: &'a str,
    metric: MetricKind,
    seed: u64,
    value: Option<f64>,
    skipped: Option<&'a str>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Defaults to the metrics in the checkpoint's config.
    pub metrics: Option<Vec<MetricKind>>,
    pub seeds: Option<Vec<u64>>,
    /// Defaults to `<run>/reports`.
    pub out: Option<PathBuf>,
    /// Defaults to the run directory name.
    pub model_id: Option<String>,
    /// Defaults to the checkpoint's `eval.representation`.
    pub representation: Option<RepresentationSource>,
}

/// Evaluates a checkpoint once per seed and writes per-metric records plus a mean ± std table.
pub fn eval_run(checkpoint_path: &Path, options: &EvalOptions) -> Result<EvalOutcome> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let config = &ckpt.config;
    let run = RunDir::of_checkpoint(checkpoint_path);
    let dir = options.out.clone().unwrap_or_else(|| run.reports());
    fs::create_dir_all(&dir)?;
    let metrics = options.metrics.clone().unwrap_or_else(|| config.eval.metrics.clone());
    let seeds = options.seeds.clone().unwrap_or_else(|| config.eval.seeds.clone());
    let model_id = options.model_id.clone().unwrap_or_else(|| run.name());

    let data = load_data(&config.data, config.train.spec.side)?;
    let rep = model_representation(&ckpt.state, options.representation.unwrap_or(config.eval.representation));
    let mut records = JsonLines::create(&dir.join("metrics.jsonl"))?;
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        log::info!("evaluating {model_id} with seed {seed}");
        let report = evaluate(&metrics, &config.metrics, Some(&rep), &data, Some(&ckpt.state.generator), seed, &model_id);
        for &metric in &metrics {
            let skipped = report.skipped.iter().find(|s| s.metric == metric).map(|s| s.reason.as_str());
            records.write(&MetricRecord {
                model_id: &model_id,
                metric,
                seed,
                value: report.get(metric),
                skipped,
            })?;
        }
        fs::write(dir.join(format!("report_seed{seed}.json")), serde_json::to_string_pretty(&report)?)?;
        reports.push(report);
    }
    records.flush()?;
    let table = AggregateTable::from_reports(&reports, &metrics);
    fs::write(dir.join("aggregate.md"), table.render())?;
    Ok(EvalOutcome { reports, table, dir })
}
