//! Output directories: the refuse-unless-forced rule, stage checkpoint
//! names, config snapshots and the append-only loss trace.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use xmodal_core::curriculum::{read_trace, write_trace, Checkpoint, CurriculumConfig, TraceRow};

use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const TRACE_FILE: &str = "trace.csv";
pub const REPORT_FILE: &str = "report.json";

/// Creates `dir` if needed. An existing non-empty directory is refused
/// unless `force`, in which case its contents are removed first.
pub fn prepare_output(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Refusal(format!("{} exists and is not a directory", dir.display())));
        }
        let mut entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        if entries.next().is_some() {
            if !force {
                return Err(CliError::Refusal(format!(
                    "{} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
                let path = entry.map_err(|e| CliError::io(dir, e))?.path();
                let removed = if path.is_dir() {
                    fs::remove_dir_all(&path)
                } else {
                    fs::remove_file(&path)
                };
                removed.map_err(|e| CliError::io(&path, e))?;
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// A pretraining run: config snapshot, `stage{k}.ckpt` files and a trace.
pub struct RunDirectory {
    pub root: PathBuf,
}

impl RunDirectory {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage_path(&self, stage: u8) -> PathBuf {
        self.root.join(format!("stage{stage}.ckpt"))
    }

    pub fn trace_path(&self) -> PathBuf {
        self.root.join(TRACE_FILE)
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn write_config(&self, config: &CurriculumConfig) -> CliResult<()> {
        let path = self.config_path();
        fs::write(&path, config.to_toml()?).map_err(|e| CliError::io(&path, e))
    }

    pub fn read_config(&self) -> CliResult<CurriculumConfig> {
        load_config(&self.config_path())
    }

    /// Highest stage with a checkpoint on disk.
    pub fn latest_stage(&self) -> Option<u8> {
        (1..=4).rev().find(|&k| self.stage_path(k).is_file())
    }

    pub fn save_checkpoint(&self, ck: &Checkpoint) -> CliResult<()> {
        Ok(ck.save(&self.stage_path(ck.stage_id))?)
    }

    /// Drops trace rows past `step`, so a resumed run continues a clean trace.
    pub fn truncate_trace(&self, step: u64) -> CliResult<()> {
        let path = self.trace_path();
        if !path.exists() {
            return Ok(());
        }
        let file = fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
        let rows: Vec<TraceRow> = read_trace(file)?.into_iter().filter(|r| r.step <= step).collect();
        let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        write_trace(file, &rows, true)?;
        Ok(())
    }
}

pub fn load_config(path: &Path) -> CliResult<CurriculumConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(CurriculumConfig::from_toml(&text)?)
}

/// Buffers trace rows and appends them to a CSV file on [`flush`](Self::flush).
pub struct TraceSink {
    path: PathBuf,
    pending: Vec<TraceRow>,
}

impl TraceSink {
    pub fn new(path: PathBuf) -> Self {
        Self {
            path,
            pending: Vec::new(),
        }
    }

    pub fn push(&mut self, row: &TraceRow) {
        self.pending.push(*row);
    }

    pub fn flush(&mut self) -> CliResult<()> {
        let fresh = fs::metadata(&self.path).map(|m| m.len() == 0).unwrap_or(true);
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| CliError::io(&self.path, e))?;
        write_trace(file, &self.pending, fresh)?;
        self.pending.clear();
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::output(path, e))?;
    let mut file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    writeln!(file, "{text}").map_err(|e| CliError::io(path, e))
}
