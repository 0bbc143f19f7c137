//! On-disk formats: the versioned checkpoint container, metrics CSV, run
//! summary and run manifest.
//!
//! A container is one JSON document:
//!
//! ```json
//! {"format":"attfc","version":1,"kind":"train_state","payload":{...}}
//! ```
//!
//! Floats are written with shortest round-trip formatting and parsed back
//! exactly, so load followed by save reproduces the original bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::trainer::{MemoryEstimate, MetricsRecord, TrainConfig, TrainState};

pub const FORMAT: &str = "attfc";
pub const VERSION: u32 = 1;

pub const KIND_TRAIN_STATE: &str = "train_state";
pub const KIND_DATASET: &str = "dataset";

pub const METRICS_HEADER: [&str; 8] = [
    "step",
    "loss",
    "lr",
    "conflicts",
    "gcc_tcc_cos",
    "verif_acc",
    "head_params",
    "step_ms",
];

#[derive(Serialize, Deserialize)]
struct Container<T> {
    format: String,
    version: u32,
    kind: String,
    payload: T,
}

#[derive(Serialize)]
struct ContainerRef<'a, T> {
    format: &'a str,
    version: u32,
    kind: &'a str,
    payload: &'a T,
}

pub fn encode_container<T: Serialize>(kind: &str, payload: &T) -> Result<Vec<u8>> {
    let doc = ContainerRef {
        format: FORMAT,
        version: VERSION,
        kind,
        payload,
    };
    serde_json::to_vec(&doc).map_err(|e| Error::Container(e.to_string()))
}

pub fn decode_container<T: DeserializeOwned>(kind: &str, bytes: &[u8]) -> Result<T> {
    let doc: Container<T> = serde_json::from_slice(bytes).map_err(|e| Error::Container(e.to_string()))?;
    if doc.format != FORMAT {
        return Err(Error::Container(format!("unknown format {:?}", doc.format)));
    }
    if doc.version != VERSION {
        return Err(Error::Container(format!(
            "unsupported version {} (expected {VERSION})",
            doc.version
        )));
    }
    if doc.kind != kind {
        return Err(Error::Container(format!("expected a {kind} container, found {}", doc.kind)));
    }
    Ok(doc.payload)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    write_file(path, &encode_container(KIND_TRAIN_STATE, state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_container(KIND_TRAIN_STATE, &read_file(path)?)
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_file(path, &encode_container(KIND_DATASET, dataset)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_container(KIND_DATASET, &read_file(path)?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.lr.to_string(),
            r.conflicts.to_string(),
            opt(r.gcc_tcc_cos),
            opt(r.verif_acc),
            r.head_params.to_string(),
            opt(r.step_ms),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn metrics_csv_bytes(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, records)?;
    Ok(buf)
}

pub fn read_metrics_csv(bytes: &[u8]) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Invalid(format!("unexpected metrics header {header:?}")));
    }
    let parse_f = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Invalid(format!("bad number {s:?}"))) };
    let parse_opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            parse_f(s).map(Some)
        }
    };
    let parse_u = |s: &str| -> Result<u64> { s.parse().map_err(|_| Error::Invalid(format!("bad integer {s:?}"))) };
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(MetricsRecord {
                step: parse_u(&rec[0])?,
                loss: parse_f(&rec[1])?,
                lr: parse_f(&rec[2])?,
                conflicts: parse_u(&rec[3])? as usize,
                gcc_tcc_cos: parse_opt(&rec[4])?,
                verif_acc: parse_opt(&rec[5])?,
                head_params: parse_u(&rec[6])? as usize,
                step_ms: parse_opt(&rec[7])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub seed: u64,
    pub steps: u64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Mean loss over the first epoch's steps.
    pub first_epoch_mean_loss: Option<f64>,
    /// Mean loss over the last epoch's steps.
    pub last_epoch_mean_loss: Option<f64>,
    pub final_verif_acc: Option<f64>,
    pub final_gcc_tcc_cos: Option<f64>,
    pub total_conflicts: usize,
    pub head_params: usize,
    /// Analytic accounting at 4 bytes per scalar.
    pub memory: MemoryEstimate,
    pub config: TrainConfig,
}

impl RunSummary {
    pub fn from_records(
        command: &str,
        config: &TrainConfig,
        records: &[MetricsRecord],
        head_params: usize,
        memory: MemoryEstimate,
    ) -> Self {
        let last_eval = records.iter().rev().find(|r| r.verif_acc.is_some());
        let epoch = (config.steps_per_epoch() as usize).min(records.len());
        let mean = |rs: &[MetricsRecord]| (!rs.is_empty()).then(|| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64);
        Self {
            command: command.to_string(),
            seed: config.seed,
            steps: records.len() as u64,
            initial_loss: records.first().map(|r| r.loss),
            final_loss: records.last().map(|r| r.loss),
            first_epoch_mean_loss: mean(&records[..epoch]),
            last_epoch_mean_loss: mean(&records[records.len() - epoch..]),
            final_verif_acc: last_eval.and_then(|r| r.verif_acc),
            final_gcc_tcc_cos: last_eval.and_then(|r| r.gcc_tcc_cos),
            total_conflicts: records.iter().map(|r| r.conflicts).sum(),
            head_params,
            memory,
            config: config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// Every field materialized, including defaults and overrides.
    pub resolved_config: serde_json::Value,
    pub output_dir: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub artifacts: Vec<String>,
    /// Command-specific details, e.g. per-row seeds of a comparison.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_file(path)?).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Peak resident set size in bytes, where the platform reports it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
