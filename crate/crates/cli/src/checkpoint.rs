//! Versioned safetensors checkpoints of a full training state.
//!
//! Arrays are stored as little-endian F64; the config echo and the counters
//! live in the header metadata. Files are written beside the target and
//! renamed into place, so a reader sees either the old file or the new one.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use obe_autodiff::Tensor;
use obe_core::trainer::{StateCounters, TrainState};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const FORMAT: &str = "obe-checkpoint";
pub const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub state: TrainState,
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("checkpoint {}: {msg}", path.display()))
}

pub fn save(path: &Path, config: &ExperimentConfig, state: &TrainState) -> Result<()> {
    let (arrays, counters) = state.to_named();
    let bytes: BTreeMap<&String, Vec<u8>> = arrays
        .iter()
        .map(|(k, t)| (k, t.iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let views = arrays
        .iter()
        .map(|(k, t)| TensorView::new(Dtype::F64, t.shape().to_vec(), &bytes[k]).map(|v| (k.clone(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| corrupt(path, e))?;
    let metadata = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("version".to_string(), VERSION.to_string()),
        ("iteration".to_string(), state.iteration.to_string()),
        ("config".to_string(), serde_json::to_string(config)?),
        ("counters".to_string(), serde_json::to_string(&counters)?),
    ]);
    let buffer = safetensors::serialize(views, Some(metadata)).map_err(|e| corrupt(path, e))?;

    let tmp = path.with_extension("safetensors.tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&buffer)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buffer = fs::read(path).map_err(|e| corrupt(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&buffer).map_err(|e| corrupt(path, e))?;
    let meta = header.metadata().as_ref().ok_or_else(|| corrupt(path, "no metadata"))?;
    let field = |k: &str| meta.get(k).ok_or_else(|| corrupt(path, format!("metadata lacks '{k}'")));
    if field("format")? != FORMAT {
        return Err(corrupt(path, "not an obe checkpoint"));
    }
    let version: u32 = field("version")?.parse().map_err(|e| corrupt(path, e))?;
    if version != VERSION {
        return Err(corrupt(path, format!("version {version} is not supported (expected {VERSION})")));
    }
    let config: ExperimentConfig = serde_json::from_str(field("config")?).map_err(|e| corrupt(path, e))?;
    let counters: StateCounters = serde_json::from_str(field("counters")?).map_err(|e| corrupt(path, e))?;

    let tensors = SafeTensors::deserialize(&buffer).map_err(|e| corrupt(path, e))?;
    let mut arrays = BTreeMap::new();
    for (name, view) in tensors.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(corrupt(path, format!("{name}: expected F64, found {:?}", view.dtype())));
        }
        let values = view
            .data()
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::from_shape_vec(ndarray::IxDyn(view.shape()), values).map_err(|e| corrupt(path, e))?;
        arrays.insert(name, tensor);
    }
    let state = TrainState::from_named(&config.train, &arrays, &counters)?;
    Ok(Checkpoint { config, state })
}

pub fn file_name(iteration: u64) -> String {
    format!("step_{iteration:08}.safetensors")
}

/// Most recent checkpoint in a directory, by iteration.
pub fn latest(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("step_") && n.ends_with(".safetensors"))
        })
        .collect();
    found.sort();
    Ok(found.pop())
}
