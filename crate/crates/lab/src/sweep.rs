//! Resumable (constraint, λ, seed) sweeps with a manifest of checkpoints.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use topo_core::checkpoint::ModelCheckpoint;
use topo_core::data::{normalize, Dataset, Split};
use topo_core::model::ModelSpec;
use topo_core::spatial::Constraint;
use topo_core::train::{train_with, Progress, TrainConfig, TrainLog};

use crate::config::Resolved;
use crate::io::{self, sha256_hex, write_atomic, NormalizationCache};
use crate::table::{csv_bytes, TRAIN_LOG_COLUMNS};
use crate::{LabError, Result, CODE_VERSION};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub model_id: String,
    pub arch: String,
    pub constraint: String,
    pub lambda: f64,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Hash of the fields a checkpoint carries (spec, epochs, batch size).
    pub spec_hash: String,
    /// Hash of everything that determines the trained parameters.
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub log: PathBuf,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment: String,
    pub arch: String,
    pub data_dir: PathBuf,
    pub train_count: usize,
    pub test_count: usize,
    pub test_limit: Option<usize>,
    pub normalization: NormalizationCache,
    pub config: crate::config::ExperimentConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(LabError::MissingPath(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| LabError::user(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self).expect("serializable").as_bytes())
    }
}

pub fn spec_hash(spec: &ModelSpec, epochs: usize, batch_size: usize) -> String {
    sha256_hex(
        format!(
            "spec-v1|{}|{}|{:?}|{}|{epochs}|{batch_size}",
            spec.arch.tag(),
            spec.constraint.tag(),
            spec.lambda,
            spec.seed
        )
        .as_bytes(),
    )
}

/// Spec hash recomputed from a checkpoint's own header.
pub fn checkpoint_spec_hash(ckpt: &ModelCheckpoint) -> String {
    spec_hash(&ckpt.spec, ckpt.epoch as usize, ckpt.batch_size as usize)
}

/// Every cell of the sweep, seed-major so that an interrupted sweep holds
/// complete conditions for the first seeds.
pub fn cells(r: &Resolved) -> Vec<ModelSpec> {
    let mut out = Vec::new();
    for seed in r.config.seed_base..r.config.seed_base + r.config.seeds {
        for &constraint in &r.constraints {
            if constraint == Constraint::None {
                out.push(ModelSpec::control(r.arch, seed));
                continue;
            }
            for &lambda in &r.config.lambdas {
                out.push(ModelSpec {
                    arch: r.arch,
                    constraint,
                    lambda,
                    seed,
                });
            }
        }
    }
    out
}

/// Normalized train/test splits plus the raw test split used by the noise
/// analyses.
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
    pub raw_test: Dataset,
    pub normalization: NormalizationCache,
}

pub fn load_data(r: &Resolved, cache: &Path) -> Result<Data> {
    let mut train = io::load(r.arch, &r.data_dir, Split::Train)?;
    let mut raw_test = io::load(r.arch, &r.data_dir, Split::Test)?;
    if let Some(n) = r.train_limit {
        train = train.head(n);
    }
    if let Some(n) = r.test_limit {
        raw_test = raw_test.head(n);
    }
    let normalization = io::train_normalization(r.arch, &train, cache)?;
    let norm = normalization.normalization()?;
    Ok(Data {
        train: normalize(&train, &norm)?,
        test: normalize(&raw_test, &norm)?,
        raw_test,
        normalization,
    })
}

fn config_hash(r: &Resolved, spec_hash: &str, data: &Data) -> String {
    sha256_hex(
        format!(
            "{spec_hash}|lr={:?}|train={}|test={}|labels={}",
            r.config.train.lr,
            data.train.len(),
            data.test.len(),
            data.normalization.labels_sha256
        )
        .as_bytes(),
    )
}

#[derive(Debug, Default)]
pub struct SweepReport {
    pub trained: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

impl SweepReport {
    pub fn summary(&self) -> String {
        let mut s = format!("{} cells trained, {} skipped", self.trained.len(), self.skipped.len());
        if !self.failed.is_empty() {
            s.push_str(&format!(", {} failed:", self.failed.len()));
            for (id, e) in &self.failed {
                s.push_str(&format!("\n  {id}: {e}"));
            }
        }
        s
    }
}

fn log_csv(log: &TrainLog) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Row<'a> {
        epoch: usize,
        split: &'a str,
        accuracy: f64,
        ce_loss: f64,
        spatial_loss: f64,
    }
    let rows: Vec<Row> = log
        .rows()
        .iter()
        .map(|r| Row {
            epoch: r.epoch,
            split: r.split,
            accuracy: r.accuracy,
            ce_loss: r.ce_loss,
            spatial_loss: r.spatial_loss,
        })
        .collect();
    csv_bytes(&rows, &TRAIN_LOG_COLUMNS)
}

fn batch_log_csv(log: &TrainLog) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Row {
        epoch: usize,
        batch: usize,
        ce_loss: f64,
        spatial_loss: f64,
        lambda: f64,
        joint_loss: f64,
    }
    let rows: Vec<Row> = log
        .batches
        .iter()
        .map(|b| Row {
            epoch: b.epoch,
            batch: b.batch,
            ce_loss: b.loss.ce,
            spatial_loss: b.loss.spatial,
            lambda: b.loss.lambda,
            joint_loss: b.loss.joint,
        })
        .collect();
    csv_bytes(&rows, &["epoch", "batch", "ce_loss", "spatial_loss", "lambda", "joint_loss"])
}

/// Trains every missing cell of `r` on a pool of `r.config.workers` threads,
/// updating the manifest after each completed cell.
pub fn run_sweep(r: &Resolved) -> Result<SweepReport> {
    let exp = &r.exp_dir;
    let data = load_data(r, &exp.join("normalization.json"))?;
    let manifest_path = exp.join(MANIFEST_FILE);
    let mut manifest = match Manifest::load(&manifest_path) {
        Ok(m) => m,
        Err(LabError::MissingPath(_)) => Manifest {
            schema_version: crate::table::SCHEMA_VERSION,
            experiment: r.config.experiment.clone(),
            arch: r.arch.tag().into(),
            data_dir: r.data_dir.clone(),
            train_count: data.train.len(),
            test_count: data.test.len(),
            test_limit: r.test_limit,
            normalization: data.normalization.clone(),
            config: r.config.clone(),
            entries: Vec::new(),
        },
        Err(e) => return Err(e),
    };
    if manifest.arch != r.arch.tag() {
        return Err(LabError::user(format!(
            "{} belongs to a {} experiment, not {}",
            manifest_path.display(),
            manifest.arch,
            r.arch.tag()
        )));
    }
    manifest.config = r.config.clone();
    manifest.normalization = data.normalization.clone();
    manifest.train_count = data.train.len();
    manifest.test_count = data.test.len();
    manifest.test_limit = r.test_limit;

    let mut report = SweepReport::default();
    let mut pending = Vec::new();
    for spec in cells(r) {
        let sh = spec_hash(&spec, r.epochs, r.batch_size);
        let ch = config_hash(r, &sh, &data);
        let done = manifest.entries.iter().any(|e| {
            e.model_id == spec.id()
                && e.config_hash == ch
                && std::fs::read(exp.join(&e.checkpoint)).is_ok_and(|b| sha256_hex(&b) == e.checkpoint_sha256)
        });
        if done {
            report.skipped.push(spec.id());
        } else {
            pending.push((spec, sh, ch));
        }
    }

    let next = AtomicUsize::new(0);
    let manifest = Mutex::new(manifest);
    let report = Mutex::new(report);
    let workers = r.config.workers.min(pending.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((spec, sh, ch)) = pending.get(i) else { break };
                let id = spec.id();
                match train_cell(r, &data, spec, sh, ch) {
                    Ok(entry) => {
                        let mut m = manifest.lock().expect("manifest lock");
                        m.entries.retain(|e| e.model_id != id);
                        m.entries.push(entry);
                        let saved = m.save(&manifest_path);
                        drop(m);
                        let mut rep = report.lock().expect("report lock");
                        match saved {
                            Ok(()) => rep.trained.push(id),
                            Err(e) => rep.failed.push((id, e.to_string())),
                        }
                    }
                    Err(e) => {
                        log::error!("{id}: {e}");
                        report.lock().expect("report lock").failed.push((id, e.to_string()));
                    }
                }
            });
        }
    });
    let manifest = manifest.into_inner().expect("manifest lock");
    manifest.save(&manifest_path)?;
    Ok(report.into_inner().expect("report lock"))
}

fn train_cell(r: &Resolved, data: &Data, spec: &ModelSpec, sh: &str, ch: &str) -> Result<ManifestEntry> {
    let id = spec.id();
    let mut cfg = TrainConfig::new(*spec);
    cfg.epochs = r.epochs;
    cfg.batch_size = r.batch_size;
    cfg.lr = r.config.train.lr;
    cfg.log_every = r.config.train.log_every;
    let start = Instant::now();
    log::info!("{id}: training {} epochs, batch {}", cfg.epochs, cfg.batch_size);
    let out = train_with(&cfg, &data.train, &data.test, &mut |p| {
        if let Progress::Epoch(e) = p {
            log::info!(
                "{id}: epoch {} train {:.4} test {:.4} ce {:.4} spatial {:.4} ({:.0}s)",
                e.epoch,
                e.train_accuracy,
                e.test_accuracy,
                e.train_ce,
                e.train_spatial,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let train_seconds = start.elapsed().as_secs_f64();
    let checkpoint = PathBuf::from("checkpoints").join(format!("{id}.ckpt"));
    let log = PathBuf::from("logs").join(format!("{id}.csv"));
    let checkpoint_sha256 = io::save_checkpoint(&r.exp_dir.join(&checkpoint), &out.checkpoint)?;
    write_atomic(&r.exp_dir.join(&log), &log_csv(&out.log)?)?;
    write_atomic(
        &r.exp_dir.join("logs").join(format!("{id}.batches.csv")),
        &batch_log_csv(&out.log)?,
    )?;
    Ok(ManifestEntry {
        model_id: id,
        arch: spec.arch.tag().into(),
        constraint: spec.constraint.tag().into(),
        lambda: spec.lambda,
        seed: spec.seed,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        spec_hash: sh.into(),
        config_hash: ch.into(),
        checkpoint,
        checkpoint_sha256,
        log,
        train_accuracy: out.checkpoint.train_accuracy,
        test_accuracy: out.checkpoint.test_accuracy,
        train_seconds,
    })
}

/// Appends a provenance record to `<dir>/provenance.json`.
pub fn write_provenance(dir: &Path, command: &str, config_hash: &str, seeds: &[u64]) -> Result<()> {
    let path = dir.join("provenance.json");
    let mut records: Vec<serde_json::Value> = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    let unix_time = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    records.push(serde_json::json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "config_hash": config_hash,
        "code_version": CODE_VERSION,
        "seeds": seeds,
        "unix_time": unix_time,
    }));
    write_atomic(&path, serde_json::to_string_pretty(&records).expect("serializable").as_bytes())
}
