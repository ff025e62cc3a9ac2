//! Run reports. Every command writes `report.json` and `config.resolved.json`
//! into its output directory.

use std::fs;
use std::path::Path;

use calm_core::config::RunConfig;
use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::error::{io_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the resolved configuration's JSON
    pub config_hash: String,
    pub checkpoint_id: Option<String>,
    pub wall_clock_seconds: f64,
    /// command-specific results: stage logs, metrics, tables
    pub result: serde_json::Value,
}

pub fn config_hash(cfg: &RunConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_run(out: &Path, report: &RunReport, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join("report.json"), report)?;
    write_json(&out.join("config.resolved.json"), cfg)
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| crate::error::format_err(path, e))
}
