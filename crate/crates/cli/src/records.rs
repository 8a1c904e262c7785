//! On-disk record types: result rows, trace rows and the run manifest.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use clinex_core::parser::ExtractionRecord;
use clinex_core::{StrategyKind, StrategySpec};
use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RESULTS_SCHEMA_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub run_id: String,
    #[serde(flatten)]
    pub record: ExtractionRecord,
    /// Set when the cell failed; the values are then the field defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ResultRow {
    pub fn key(&self) -> (String, StrategyKind, String) {
        (self.record.model_id.clone(), self.record.strategy, self.record.report_id.clone())
    }
}

/// One chat call (or skipped graph node) of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub run_id: String,
    pub report_id: String,
    pub model_id: String,
    pub strategy: StrategyKind,
    pub turn: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub messages: usize,
    /// Hash of the request sent, shared with the response cache.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_hash: Option<String>,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub latency_s: f64,
    #[serde(default)]
    pub retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub report_id: String,
    pub model_id: String,
    pub strategy: StrategyKind,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTiming {
    pub cells: usize,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub task_id: String,
    pub task_hash: String,
    pub models_hash: String,
    pub corpus_id: String,
    pub seed: u64,
    pub models: Vec<String>,
    pub strategies: Vec<StrategySpec>,
    /// Example ids drawn for each strategy.
    pub examples: IndexMap<String, Vec<String>>,
    pub cache_mode: String,
    pub started_at: String,
    #[serde(default)]
    pub finished_at: Option<String>,
    pub cells_total: usize,
    #[serde(default)]
    pub cells_resumed: usize,
    #[serde(default)]
    pub cells_executed: usize,
    #[serde(default)]
    pub network_requests: u64,
    #[serde(default)]
    pub failures: Vec<FailureEntry>,
    /// Wall-clock per cell, by strategy, for cells executed in this invocation.
    #[serde(default)]
    pub timings: IndexMap<String, StrategyTiming>,
}

/// Reads a JSON-lines file; a missing file reads as empty.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(row);
    }
    Ok(out)
}

/// Replaces `path` with one JSON object per line, via a temporary file.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).expect("record types always serialize");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("record types always serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Appends one JSON line and flushes, so an interrupted run keeps finished cells.
pub fn append_line<T: Serialize>(file: &mut File, row: &T) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(row).expect("record types always serialize");
    line.push(b'\n');
    file.write_all(&line)?;
    file.flush()
}
