//! Experiment configuration: a preset, a TOML file on top, then `--set` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use obe_core::datasets::ToyFactorSpec;
use obe_core::metrics::{MetricKind, MetricProtocol};
use obe_core::trainer::{RepresentationSource, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Dsprites,
    Celeba,
    Toy,
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsprites" => Ok(Preset::Dsprites),
            "celeba" => Ok(Preset::Celeba),
            "toy" => Ok(Preset::Toy),
            other => Err(CliError::config(format!("preset: unknown preset '{other}' (dsprites, celeba, toy)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Dsprites => "dsprites",
            Preset::Celeba => "celeba",
            Preset::Toy => "toy",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Procedural squares, regenerated on demand.
    Toy,
    /// The published dSprites archive.
    Dsprites,
    /// Any archive in the dSprites layout.
    Npz,
    /// A directory of face images, unlabeled.
    Celeba,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    pub toy: ToyFactorSpec,
    /// Shuffles the toy dataset's record order.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<MetricKind>,
    pub seeds: Vec<u64>,
    pub representation: RepresentationSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub out: PathBuf,
    /// Checkpoint every this many iterations; the final state is always saved.
    pub checkpoint_every: usize,
    /// Log every this many iterations.
    pub log_every: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub metrics: MetricProtocol,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let (train, data, metrics) = match preset {
            Preset::Dsprites => (
                TrainConfig::dsprites(),
                DataConfig {
                    kind: DataKind::Dsprites,
                    path: Some("data/dsprites_ndarray_co1sh3sc6or40x32y32_64x64.npz".into()),
                    limit: None,
                    toy: ToyFactorSpec::default(),
                    seed: 0,
                },
                MetricKind::DISENTANGLEMENT.to_vec(),
            ),
            Preset::Celeba => (
                TrainConfig::celeba(),
                DataConfig {
                    kind: DataKind::Celeba,
                    path: Some("data/celeba".into()),
                    limit: None,
                    toy: ToyFactorSpec::default(),
                    seed: 0,
                },
                vec![MetricKind::Vp, MetricKind::Quality],
            ),
            Preset::Toy => (
                TrainConfig::toy(),
                DataConfig {
                    kind: DataKind::Toy,
                    path: None,
                    limit: None,
                    toy: ToyFactorSpec::default(),
                    seed: 0,
                },
                vec![MetricKind::Factorvae, MetricKind::Mig, MetricKind::Sap],
            ),
        };
        ExperimentConfig {
            preset,
            out: PathBuf::from("runs").join(preset.to_string()),
            checkpoint_every: 1000,
            log_every: 1,
            data,
            train,
            metrics: MetricProtocol::default(),
            eval: EvalConfig {
                metrics,
                seeds: vec![0, 1, 2],
                representation: RepresentationSource::Auto,
            },
        }
    }

    /// Builds a config from an optional file and `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                text.parse::<Table>().map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let overrides = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
        Self::from_table(file, &overrides)
    }

    pub fn from_table(file: Table, overrides: &[(String, Value)]) -> Result<Self> {
        let preset = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v)
            .or_else(|| file.get("preset"))
            .map(|v| v.as_str().ok_or_else(|| CliError::config("preset: must be a string")).and_then(str::parse))
            .transpose()?
            .unwrap_or(Preset::Dsprites);
        let mut merged = match Value::try_from(Self::preset(preset)) {
            Ok(Value::Table(t)) => t,
            other => return Err(CliError::runtime(format!("preset did not serialize to a table: {other:?}"))),
        };
        merge(&mut merged, file);
        for (key, value) in overrides {
            let key = resolve_key(&merged, key);
            set_path(&mut merged, &key, value.clone())?;
        }
        let config: ExperimentConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.message().trim().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.metrics.vp.validate()?;
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(CliError::config("checkpoint_every / log_every: must be positive"));
        }
        if self.data.kind == DataKind::Toy {
            self.data.toy.validate()?;
            if self.data.toy.side != self.train.spec.side || self.train.spec.channels != 1 {
                return Err(CliError::config(format!(
                    "data.toy.side: toy images are {}x{} with 1 channel, the model expects {}x{} with {}",
                    self.data.toy.side, self.data.toy.side, self.train.spec.side, self.train.spec.side, self.train.spec.channels
                )));
            }
        } else if self.data.path.is_none() {
            return Err(CliError::config("data.path: required for this dataset kind"));
        }
        if self.eval.seeds.is_empty() {
            return Err(CliError::config("eval.seeds: at least one seed required"));
        }
        Ok(())
    }

    /// TOML text that [`ExperimentConfig::load`] reads back to the same value.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::runtime(format!("config echo: {e}")))
    }
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Splits `a.b.c=value`; the value is read as a TOML literal, or as a bare string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set {s}: expected key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::config(format!("--set {s}: empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Keys that name a training field may drop the `train.` prefix.
fn resolve_key(merged: &Table, key: &str) -> String {
    let head = key.split('.').next().unwrap_or(key);
    let is_train_field = merged.get("train").and_then(Value::as_table).is_some_and(|t| t.contains_key(head))
        || ["inner_lr"].contains(&head);
    if !merged.contains_key(head) && is_train_field {
        format!("train.{key}")
    } else {
        key.to_string()
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut node = table;
    for (i, part) in parts.iter().enumerate() {
        let entry = node.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("{}: not a table", parts[..=i].join("."))))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
