use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Algo, ExperimentConfig, MetricsRecord, StepTiming, TrainError};
use crate::policy::{save_checkpoint, PolicyParams};

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: u32,
    pub subcommand: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algo: Algo,
    pub seed: u64,
    pub steps: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
}

fn io(e: impl std::fmt::Display) -> TrainError {
    TrainError::Io(e.to_string())
}

/// Output directory of one run.
pub struct RunDir {
    root: PathBuf,
    metrics: File,
    timings: File,
}

impl RunDir {
    pub const CONFIG: &'static str = "config.toml";
    pub const MANIFEST: &'static str = "manifest.json";
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const TIMINGS: &'static str = "timings.jsonl";
    pub const SUMMARY: &'static str = "summary.json";
    pub const FINAL_CHECKPOINT: &'static str = "final.ckpt";

    /// Creates the directory, echoes the resolved config and writes the
    /// manifest. Existing metrics are truncated.
    pub fn create(root: &Path, config: &ExperimentConfig, subcommand: &str) -> Result<Self, TrainError> {
        fs::create_dir_all(root.join("checkpoints")).map_err(io)?;
        let text = toml::to_string(config).map_err(io)?;
        fs::write(root.join(Self::CONFIG), text).map_err(io)?;
        let manifest = RunManifest {
            artifact_version: ARTIFACT_VERSION,
            subcommand: subcommand.to_string(),
            seed: config.seed,
            started_at: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config: config.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(io)?;
        fs::write(root.join(Self::MANIFEST), json + "\n").map_err(io)?;
        let open = |name: &str| {
            OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(root.join(name))
                .map_err(io)
        };
        Ok(Self {
            root: root.to_path_buf(),
            metrics: open(Self::METRICS)?,
            timings: open(Self::TIMINGS)?,
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn append_step(&mut self, record: &MetricsRecord, timing: &StepTiming) -> Result<(), TrainError> {
        let line = serde_json::to_string(record).map_err(io)?;
        writeln!(self.metrics, "{line}").map_err(io)?;
        let line = serde_json::to_string(timing).map_err(io)?;
        writeln!(self.timings, "{line}").map_err(io)
    }

    pub fn save_step_checkpoint(&self, step: usize, params: &PolicyParams) -> Result<(), TrainError> {
        let path = self.root.join("checkpoints").join(format!("step_{step:06}.ckpt"));
        save_checkpoint(params, &path).map_err(io)
    }

    pub fn save_final(&self, params: &PolicyParams) -> Result<(), TrainError> {
        save_checkpoint(params, &self.root.join(Self::FINAL_CHECKPOINT)).map_err(io)
    }

    pub fn write_summary(&self, summary: &RunSummary) -> Result<(), TrainError> {
        let json = serde_json::to_string_pretty(summary).map_err(io)?;
        fs::write(self.root.join(Self::SUMMARY), json + "\n").map_err(io)
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, TrainError> {
    let f = File::open(path).map_err(|e| io(format!("{}: {e}", path.display())))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, l)| {
            let l = l.map_err(io)?;
            serde_json::from_str(&l)
                .map_err(|e| TrainError::Schema(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Reads `metrics.jsonl` from a run directory (or a direct file path).
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, TrainError> {
    if path.is_dir() {
        read_jsonl(&path.join(RunDir::METRICS))
    } else {
        read_jsonl(path)
    }
}

/// Reads `timings.jsonl` from a run directory.
pub fn read_timings(dir: &Path) -> Result<Vec<StepTiming>, TrainError> {
    read_jsonl(&dir.join(RunDir::TIMINGS))
}
