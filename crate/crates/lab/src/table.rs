//! Versioned CSV/JSON result tables.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use topo_core::metrics::MetricRow;
use topo_core::perturb::{NoiseRow, WeightNoiseRow};

use crate::io::write_atomic;
use crate::{LabError, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const METRIC_COLUMNS: [&str; 8] = ["model_id", "constraint", "lambda", "seed", "metric", "param1", "param2", "value"];
pub const NOISE_COLUMNS: [&str; 6] = ["model_id", "noise_kind", "intensity", "repetition", "accuracy", "normalized_accuracy"];
pub const WEIGHT_NOISE_COLUMNS: [&str; 7] = ["model_id", "sigma_level", "repetition", "accuracy", "drop_abs", "drop_rel", "soi"];
pub const TRAIN_LOG_COLUMNS: [&str; 5] = ["epoch", "split", "accuracy", "ce_loss", "spatial_loss"];

/// Long-format metric record; `value` is empty in CSV and `null` in JSON
/// when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model_id: String,
    pub constraint: String,
    pub lambda: f64,
    pub seed: u64,
    pub metric: String,
    pub param1: String,
    pub param2: String,
    pub value: Option<f64>,
}

impl From<&MetricRow> for MetricRecord {
    fn from(r: &MetricRow) -> Self {
        Self {
            model_id: r.model_id.clone(),
            constraint: r.constraint.into(),
            lambda: r.lambda,
            seed: r.seed,
            metric: r.metric.clone(),
            param1: r.param1.clone(),
            param2: r.param2.clone(),
            value: r.value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub model_id: String,
    pub noise_kind: String,
    pub intensity: f64,
    pub repetition: usize,
    pub accuracy: f64,
    pub normalized_accuracy: f64,
}

impl From<&NoiseRow> for NoiseRecord {
    fn from(r: &NoiseRow) -> Self {
        Self {
            model_id: r.model_id.clone(),
            noise_kind: r.noise_kind.into(),
            intensity: r.intensity,
            repetition: r.repetition,
            accuracy: r.accuracy,
            normalized_accuracy: r.normalized_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNoiseRecord {
    pub model_id: String,
    pub sigma_level: f64,
    pub repetition: usize,
    pub accuracy: f64,
    pub drop_abs: f64,
    pub drop_rel: f64,
    pub soi: f64,
}

impl From<&WeightNoiseRow> for WeightNoiseRecord {
    fn from(r: &WeightNoiseRow) -> Self {
        Self {
            model_id: r.model_id.clone(),
            sigma_level: r.sigma_level,
            repetition: r.repetition,
            accuracy: r.accuracy,
            drop_abs: r.drop_abs,
            drop_rel: r.drop_rel,
            soi: r.soi,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonTable<R> {
    schema_version: u32,
    columns: Vec<String>,
    rows: R,
}

pub fn csv_bytes<T: Serialize>(rows: &[T], columns: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(columns).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| LabError::Internal(e.to_string()))
}

/// Writes `<stem>.csv` and `<stem>.json` under `dir`.
pub fn write_table<T: Serialize>(dir: &Path, stem: &str, columns: &[&str], rows: &[T]) -> Result<()> {
    write_atomic(&dir.join(format!("{stem}.csv")), &csv_bytes(rows, columns)?)?;
    let json = JsonTable {
        schema_version: SCHEMA_VERSION,
        columns: columns.iter().map(|c| c.to_string()).collect(),
        rows,
    };
    write_atomic(
        &dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&json).expect("serializable").as_bytes(),
    )
}

/// Reads a CSV or JSON table, rejecting files whose columns differ from
/// `columns`.
pub fn read_table<T: DeserializeOwned>(path: &Path, columns: &[&str]) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(LabError::MissingPath(path.to_path_buf()));
    }
    let mismatch = |found: Vec<String>| {
        LabError::user(format!(
            "mixed schemas: {} has columns [{}], expected [{}]",
            path.display(),
            found.join(","),
            columns.join(",")
        ))
    };
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(format!("reading {}", path.display()), e))?;
        let t: JsonTable<Vec<serde_json::Value>> =
            serde_json::from_str(&text).map_err(|e| LabError::user(format!("{}: {e}", path.display())))?;
        if t.schema_version != SCHEMA_VERSION || t.columns != columns {
            return Err(mismatch(t.columns));
        }
        return t
            .rows
            .into_iter()
            .map(|v| serde_json::from_value(v).map_err(|e| LabError::user(format!("{}: {e}", path.display()))))
            .collect();
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != columns {
        return Err(mismatch(header));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| LabError::user(format!("{}: {e}", path.display()))))
        .collect()
}

fn csv_err(e: csv::Error) -> LabError {
    LabError::Internal(format!("csv: {e}"))
}
