//! Output directory layout and the lock that gives one run exclusive use of it.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, ErrorKind, Write};
use std::path::{Path, PathBuf};

use obe_core::datasets::{load_celeba, load_dsprites, load_factor_npz, toy_dataset, FactorDataset};
use serde::Serialize;

use crate::config::{DataConfig, DataKind, ExperimentConfig};
use crate::error::{CliError, Result};

pub const CONFIG_ECHO: &str = "config.toml";
pub const TRAIN_LOG: &str = "log.jsonl";
pub const LOCK: &str = "run.lock";

/// `<root>/{config.toml, log.jsonl, checkpoints/, figures/, reports/}`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        let dir = RunDir { root: root.to_path_buf() };
        for sub in [dir.checkpoints(), dir.figures(), dir.reports()] {
            fs::create_dir_all(sub)?;
        }
        Ok(dir)
    }

    /// Run directory owning a checkpoint at `<root>/checkpoints/<file>`.
    pub fn of_checkpoint(path: &Path) -> Self {
        let root = path
            .parent()
            .filter(|p| p.file_name().is_some_and(|n| n == "checkpoints"))
            .and_then(Path::parent)
            .or_else(|| path.parent())
            .unwrap_or(Path::new("."));
        RunDir { root: root.to_path_buf() }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join(TRAIN_LOG)
    }

    pub fn name(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    }

    pub fn lock(&self) -> Result<RunLock> {
        let path = self.root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::runtime(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }

    pub fn write_config(&self, config: &ExperimentConfig) -> Result<()> {
        fs::write(self.root.join(CONFIG_ECHO), config.to_toml()?)?;
        Ok(())
    }
}

/// Removes the lock file when dropped.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Line-delimited JSON records.
pub struct JsonLines {
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonLines {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        Ok(JsonLines {
            out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_json_lines(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CliError::from))
        .collect()
}

pub fn load_data(data: &DataConfig, side: usize) -> Result<FactorDataset> {
    let path = || {
        data.path
            .as_deref()
            .ok_or_else(|| CliError::config("data.path: required for this dataset kind"))
    };
    let out = match data.kind {
        DataKind::Toy => toy_dataset(&data.toy, data.seed)?,
        DataKind::Dsprites => load_dsprites(path()?)?,
        DataKind::Npz => load_factor_npz(path()?)?,
        DataKind::Celeba => load_celeba(path()?, side, data.limit)?,
    };
    Ok(out)
}
