//! `run_manifest.json`: one record per subcommand, updated in place.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use copl_core::harness::CONFIG_VERSION;
use copl_core::{json, ExperimentConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// SHA-256 of the effective config, output directory excluded.
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub wall_time_seconds: f64,
    pub outputs: Vec<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    runs: BTreeMap<String, RunRecord>,
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut canonical = cfg.clone();
    canonical.output_dir = None;
    let bytes = json::to_vec(&canonical)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunRecord {
    pub fn new(cfg: &ExperimentConfig, outputs: Vec<String>, wall_time_seconds: f64) -> Result<Self> {
        let versions = BTreeMap::from([
            ("copl".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("config".to_string(), CONFIG_VERSION.to_string()),
        ]);
        Ok(Self {
            config_hash: config_hash(cfg)?,
            seed: cfg.master_seed,
            versions,
            wall_time_seconds,
            outputs,
        })
    }
}

/// Stores `record` under `command`, keeping other subcommands' entries.
pub fn record(out: &Path, command: &str, record: RunRecord) -> Result<()> {
    let path = out.join(MANIFEST_FILE);
    let mut manifest: Manifest = if path.exists() {
        json::read_file(&path).unwrap_or_else(|e| {
            log::warn!("replacing unreadable manifest {}: {e}", path.display());
            Manifest::default()
        })
    } else {
        Manifest::default()
    };
    manifest.runs.insert(command.to_string(), record);
    json::write_file(&path, &manifest).with_context(|| format!("writing {}", path.display()))
}
