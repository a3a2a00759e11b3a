//! Several training variants under shared seeds, evaluated into one comparison table.

use std::fs;
use std::path::PathBuf;

use obe_core::metrics::{AggregateTable, MetricReport};
use obe_core::trainer::{ablation_variants, TrainConfig, Variant};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::eval::{eval_run, EvalOptions};
use crate::run::{JsonLines, RunDir};
use crate::train::train_run;

/// Reference FactorVAE values at full training scale, listed next to desk-scale tables.
pub const REFERENCE_FACTORVAE: [(&str, f64); 2] = [("full", 0.946), ("alternating_off", 0.930)];

#[derive(Clone, Debug, Serialize)]
pub struct VariantRun {
    pub variant: String,
    pub train_seed: u64,
    pub data_order: Option<String>,
    pub checkpoint: Option<String>,
    pub error: Option<String>,
}

pub struct CompareOutcome {
    pub table: AggregateTable,
    pub reports: Vec<MetricReport>,
    pub runs: Vec<VariantRun>,
    /// Every variant trained on the same data order for a given seed.
    pub shared_data_order: bool,
    pub report: PathBuf,
}

/// Trains and evaluates each variant for each training seed; failures leave gaps.
pub fn compare_run(config: &ExperimentConfig, variants: &[Variant], train_seeds: &[u64], title: &str) -> Result<CompareOutcome> {
    config.validate()?;
    let root = RunDir::create(&config.out)?;
    let _lock = root.lock()?;
    root.write_config(config)?;
    let mut reports = Vec::new();
    let mut runs = Vec::new();
    let mut records = JsonLines::create(&root.reports().join(format!("{title}.jsonl")))?;
    for variant in variants {
        for &seed in train_seeds {
            let sub = ExperimentConfig {
                out: root.root.join("variants").join(&variant.name).join(format!("seed{seed}")),
                train: TrainConfig {
                    seed,
                    ..variant.config.clone()
                },
                ..config.clone()
            };
            log::info!("{title}: training {} with seed {seed}", variant.name);
            let outcome = train_run(&sub, false).and_then(|t| {
                let order = std::fs::read_to_string(t.run.reports().join("summary.json"))?;
                let order: serde_json::Value = serde_json::from_str(&order)?;
                let eval = eval_run(
                    &t.checkpoint,
                    &EvalOptions {
                        model_id: Some(variant.name.clone()),
                        ..Default::default()
                    },
                )?;
                Ok((t.checkpoint, order["data_order"].as_str().map(str::to_string), eval.reports))
            });
            let run = match outcome {
                Ok((ckpt, order, r)) => {
                    reports.extend(r);
                    VariantRun {
                        variant: variant.name.clone(),
                        train_seed: seed,
                        data_order: order,
                        checkpoint: Some(ckpt.display().to_string()),
                        error: None,
                    }
                }
                Err(e) => {
                    log::error!("{title}: {} seed {seed} failed: {e}", variant.name);
                    VariantRun {
                        variant: variant.name.clone(),
                        train_seed: seed,
                        data_order: None,
                        checkpoint: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            records.write(&run)?;
            runs.push(run);
        }
    }
    records.flush()?;

    let mut table = AggregateTable::from_reports(&reports, &config.eval.metrics);
    for v in variants {
        if !table.rows.iter().any(|(name, _)| name == &v.name) {
            table.rows.push((v.name.clone(), vec![None; table.metrics.len()]));
        }
    }
    let shared_data_order = train_seeds.iter().all(|&seed| {
        let mut orders = runs.iter().filter(|r| r.train_seed == seed).map(|r| &r.data_order);
        let first = orders.next();
        orders.all(|o| Some(o) == first)
    });

    let mut text = format!("# {title}\n\n{}\n", table.render());
    if title == "ablation" {
        text.push_str("\nReference FactorVAE at full training scale:");
        for (name, v) in REFERENCE_FACTORVAE {
            text.push_str(&format!(" {name} {v:.3};"));
        }
        text.push('\n');
    }
    text.push_str(&format!(
        "\n## Seed audit\n\nshared data order per seed: {shared_data_order}\n\n| variant | train seed | data order | status |\n|---|---|---|---|\n"
    ));
    for r in &runs {
        text.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            r.variant,
            r.train_seed,
            r.data_order.as_deref().unwrap_or("-"),
            r.error.as_deref().unwrap_or("ok")
        ));
    }
    let report = root.reports().join(format!("{title}.md"));
    fs::write(&report, text)?;
    Ok(CompareOutcome {
        table,
        reports,
        runs,
        shared_data_order,
        report,
    })
}

/// The full model and its three ablations.
pub fn ablate_run(config: &ExperimentConfig, train_seeds: &[u64]) -> Result<CompareOutcome> {
    compare_run(config, &ablation_variants(&config.train), train_seeds, "ablation")
}
