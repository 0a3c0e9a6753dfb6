//! Per-run provenance record, written next to the outputs whether the run
//! succeeds or fails.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Manifest file name for `command`; distinct per command so runs sharing a
/// directory do not overwrite each other's record.
pub fn manifest_file(command: &str) -> String {
    format!("manifest.{command}.json")
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn digest_file(path: &Path) -> Result<InputDigest> {
    let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        bytes: data.len() as u64,
        sha256: hex::encode(Sha256::digest(&data)),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub cli_version: &'static str,
    pub core_version: &'static str,
    pub args: Vec<String>,
    pub status: &'static str,
    pub exit_code: u8,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub seed: Option<u64>,
    pub execution: Option<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub counts: serde_json::Map<String, serde_json::Value>,
    pub stages: Vec<StageTime>,
    pub started_unix_s: u64,
    pub total_seconds: f64,
}

/// Bookkeeping for one command: manifest fields, stage clock, and the outputs
/// written so far (so they can be removed if a later stage fails).
pub struct Run {
    pub manifest: RunManifest,
    out_dir: Option<PathBuf>,
    written: Vec<PathBuf>,
    started: Instant,
    lap: Instant,
}

impl Run {
    pub fn new(command: &str) -> Self {
        let now = Instant::now();
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                cli_version: env!("CARGO_PKG_VERSION"),
                core_version: abd_core::VERSION,
                args: std::env::args().collect(),
                status: "running",
                exit_code: 0,
                failed_stage: None,
                error: None,
                seed: None,
                execution: None,
                config: serde_json::Value::Null,
                inputs: Vec::new(),
                outputs: Vec::new(),
                counts: serde_json::Map::new(),
                stages: Vec::new(),
                started_unix_s: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map_or(0, |d| d.as_secs()),
                total_seconds: 0.0,
            },
            out_dir: None,
            written: Vec::new(),
            started: now,
            lap: now,
        }
    }

    pub fn set_out_dir(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir.as_deref().expect("output directory set")
    }

    /// Closes the current stage and records its wall-clock time.
    pub fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.manifest.stages.push(StageTime {
            stage: stage.to_string(),
            seconds: now.duration_since(self.lap).as_secs_f64(),
        });
        self.lap = now;
    }

    pub fn add_stage_seconds(&mut self, stage: &str, seconds: f64) {
        self.manifest.stages.push(StageTime {
            stage: stage.to_string(),
            seconds,
        });
    }

    /// Restarts the stage clock without recording anything.
    pub fn reset_lap(&mut self) {
        self.lap = Instant::now();
    }

    pub fn count(&mut self, key: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.manifest.counts.insert(key.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.push(digest_file(path)?);
        Ok(())
    }

    /// Writes `name` in the output directory through `fill`.
    pub fn write_output(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>,
    ) -> Result<PathBuf> {
        let path = self.out_dir().join(name);
        let file =
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        self.written.push(path.clone());
        let mut w = BufWriter::new(file);
        fill(&mut w)?;
        w.flush()?;
        self.manifest.outputs.push(path.display().to_string());
        Ok(path)
    }

    /// Registers a file written by someone else as an output of this run.
    pub fn track(&mut self, path: &Path) {
        self.written.push(path.to_path_buf());
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        self.write_output(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    /// Marks the run failed and deletes every output it wrote.
    pub fn fail(&mut self, code: u8, stage: Option<String>, error: String) {
        for p in self.written.drain(..) {
            if !p.exists() {
                continue;
            }
            if let Err(e) = fs::remove_file(&p) {
                log::warn!("could not remove partial output {}: {e}", p.display());
            }
        }
        self.manifest.outputs.clear();
        self.manifest.status = "failure";
        self.manifest.exit_code = code;
        self.manifest.failed_stage = stage;
        self.manifest.error = Some(error);
    }

    /// Writes the manifest if an output directory is known.
    pub fn finish(mut self) {
        if self.manifest.status == "running" {
            self.manifest.status = "success";
        }
        self.manifest.total_seconds = self.started.elapsed().as_secs_f64();
        let Some(dir) = self.out_dir.clone() else {
            return;
        };
        let path = dir.join(manifest_file(&self.manifest.command));
        let result = serde_json::to_string_pretty(&self.manifest)
            .map_err(anyhow::Error::from)
            .and_then(|text| fs::write(&path, text + "\n").map_err(anyhow::Error::from));
        if let Err(e) = result {
            log::error!("could not write {}: {e}", path.display());
        }
    }
}
