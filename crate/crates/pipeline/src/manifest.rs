//! `manifest.json`: content hashes of every artifact in the output
//! directory, the seeds and config hash that produced them, and per-node
//! optimization timings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub sha256: String,
    /// Subcommand that wrote the file.
    pub command: String,
    pub config_hash: String,
}

/// Wall-clock cost of one phase-one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTiming {
    pub x0_dot: f64,
    pub s_des: f64,
    pub seconds: f64,
    pub evaluations: usize,
    /// Evaluations that ended in a fall before the episode time ran out.
    pub early_terminations: usize,
    pub failed: bool,
}

pub const TIMING_HEADER: &str = "x0_dot,s_des,seconds,evaluations,early_terminations,failed";

pub fn timing_csv(rows: &[NodeTiming]) -> String {
    let mut out = format!("{TIMING_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.x0_dot,
            r.s_des,
            r.seconds,
            r.evaluations,
            r.early_terminations,
            u8::from(r.failed)
        ));
    }
    out
}

pub fn timing_from_csv(text: &str) -> Result<Vec<NodeTiming>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TIMING_HEADER) {
        return Err(PipelineError::Manifest(format!(
            "timing CSV must start with '{TIMING_HEADER}'"
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let bad = || PipelineError::Manifest(format!("timing row {}: malformed", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(NodeTiming {
                x0_dot: f[0].parse().map_err(|_| bad())?,
                s_des: f[1].parse().map_err(|_| bad())?,
                seconds: f[2].parse().map_err(|_| bad())?,
                evaluations: f[3].parse().map_err(|_| bad())?,
                early_terminations: f[4].parse().map_err(|_| bad())?,
                failed: match f[5] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad()),
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// Master seed and any per-command validation seeds.
    pub seeds: BTreeMap<String, u64>,
    /// Artifact name (relative to the output directory) to its record.
    pub files: BTreeMap<String, FileRecord>,
    pub failed_nodes: Vec<[f64; 2]>,
    pub timings: Vec<NodeTiming>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    /// Loads the manifest of `dir`, or an empty one if there is none yet.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Manifest(e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Checks that `name` is recorded and unchanged on disk.
    pub fn verify(&self, dir: &Path, name: &str) -> Result<()> {
        let record = self
            .files
            .get(name)
            .ok_or_else(|| PipelineError::MissingInput(name.to_string()))?;
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        let found = sha256_hex(&bytes);
        if found != record.sha256 {
            return Err(PipelineError::Tampered {
                path: path.display().to_string(),
                expected: record.sha256.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn verify_all(&self, dir: &Path) -> Result<()> {
        self.files.keys().try_for_each(|name| self.verify(dir, name))
    }

    /// Verifies `name` and returns its contents.
    pub fn read_verified(&self, dir: &Path, name: &str) -> Result<String> {
        self.verify(dir, name)?;
        let path = dir.join(name);
        std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))
    }

    /// Writes an artifact and records its hash.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8], command: &str) -> Result<PathBuf> {
        let path = dir.join(name);
        write_file(&path, bytes)?;
        self.files.insert(
            name.to_string(),
            FileRecord {
                sha256: sha256_hex(bytes),
                command: command.to_string(),
                config_hash: self.config_hash.clone(),
            },
        );
        Ok(path)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}
