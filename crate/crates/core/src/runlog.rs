//! Run manifests and the per-step JSON-lines log.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::train::StepRecord;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "log.jsonl";
/// Version of the manifest and CSV schemas.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub schema_version: u32,
    pub seed: u64,
    /// Version of the crate that produced the outputs.
    pub version: String,
    pub stage: String,
    /// Files written next to the manifest.
    pub outputs: Vec<String>,
}

impl RunManifest {
    /// The run id is derived from config hash, seed and stage, so repeated
    /// runs with identical inputs produce identical manifests.
    pub fn new(config_hash: &str, seed: u64, stage: &str) -> Self {
        let mut h = Sha256::new();
        h.update(config_hash.as_bytes());
        h.update(seed.to_le_bytes());
        h.update(stage.as_bytes());
        Self {
            run_id: hex::encode(&h.finalize()[..8]),
            config_hash: config_hash.to_string(),
            schema_version: SCHEMA_VERSION,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            stage: stage.to_string(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(p)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }
}

pub fn write_step_log(dir: &Path, records: &[StepRecord]) -> Result<PathBuf> {
    let p = dir.join(LOG_FILE);
    let mut w = BufWriter::new(fs::File::create(&p)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(p)
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepRecord>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
