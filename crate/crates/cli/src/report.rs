use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Plot-ready table written next to every JSON report.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<I: IntoIterator<Item = S>, S: ToString>(&mut self, row: I) {
        self.rows.push(row.into_iter().map(|c| c.to_string()).collect());
    }
}

#[derive(Debug, Serialize)]
pub struct Report<P: Serialize> {
    pub operation: String,
    pub schema_version: u32,
    /// SHA-256 of the command's arguments.
    pub config_digest: String,
    /// SHA-256 of the arguments plus every input file.
    pub inputs_digest: String,
    pub checkpoint: Option<String>,
    pub seed: u64,
    pub timestamp: u64,
    pub payload: P,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digests of a command's arguments and of those arguments plus the
/// contents of its input files.
pub fn digests(args: &impl Serialize, inputs: &[PathBuf]) -> Result<(String, String), CliError> {
    let args = serde_json::to_vec(args).expect("arguments serialize");
    let mut h = Sha256::new();
    h.update(&args);
    for p in inputs {
        h.update(p.display().to_string().as_bytes());
        h.update(fs::read(p).map_err(|e| CliError::io(p, e))?);
    }
    Ok((sha256_hex(&args), hex::encode(h.finalize())))
}

pub struct ReportMeta {
    pub config_digest: String,
    pub inputs_digest: String,
    pub checkpoint: Option<String>,
    pub seed: u64,
}

pub fn write_report<P: Serialize>(
    out_dir: &Path,
    operation: &str,
    meta: ReportMeta,
    payload: P,
    table: &Table,
) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let report = Report {
        operation: operation.to_string(),
        schema_version: SCHEMA_VERSION,
        config_digest: meta.config_digest,
        inputs_digest: meta.inputs_digest,
        checkpoint: meta.checkpoint,
        seed: meta.seed,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        payload,
    };
    let json_path = out_dir.join(format!("{operation}.json"));
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&json_path, text + "\n").map_err(|e| CliError::io(&json_path, e))?;

    let csv_path = out_dir.join(format!("{operation}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(drt_core::Error::from)?;
    w.write_record(&table.header).map_err(drt_core::Error::from)?;
    for r in &table.rows {
        w.write_record(r).map_err(drt_core::Error::from)?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    Ok(json_path)
}
