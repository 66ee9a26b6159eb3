//! Dataset loaders, normalization cache, checkpoint files and atomic writes.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use topo_core::checkpoint::ModelCheckpoint;
use topo_core::data::{mnist_from_idx, parse_cifar_batch, Dataset, Normalization, Split};
use topo_core::model::Arch;

use crate::{LabError, Result};

/// Environment variable naming the directory that holds `mnist/` and
/// `cifar10/`.
pub const DATA_ROOT_ENV: &str = "TOPOLAB_DATA_ROOT";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads `path`, falling back to `path.gz` and decompressing it.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    let (source, compressed) = if path.exists() {
        (path.to_path_buf(), path.extension().is_some_and(|e| e == "gz"))
    } else if gz.exists() {
        (gz, true)
    } else {
        return Err(LabError::MissingPath(path.to_path_buf()));
    };
    let raw = fs::read(&source).map_err(|e| LabError::io(format!("reading {}", source.display()), e))?;
    if !compressed {
        return Ok(raw);
    }
    let mut out = Vec::new();
    GzDecoder::new(&raw[..])
        .read_to_end(&mut out)
        .map_err(|e| LabError::io(format!("decompressing {}", source.display()), e))?;
    Ok(out)
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = read_maybe_gz(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = read_maybe_gz(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    Ok(mnist_from_idx(&images, &labels, split)?)
}

/// Loads the CIFAR-10 binary batches from `dir` or its
/// `cifar-10-batches-bin` subdirectory.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let nested = dir.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for name in names {
        let bytes = read_maybe_gz(&dir.join(&name))?;
        let (p, l) = parse_cifar_batch(&bytes).map_err(|e| LabError::user(format!("{name}: {e}")))?;
        pixels.extend(p);
        labels.extend(l);
    }
    Ok(Dataset::new(pixels, labels, (3, 32, 32), split)?)
}

pub fn load(arch: Arch, dir: &Path, split: Split) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(LabError::MissingPath(dir.to_path_buf()));
    }
    match arch {
        Arch::Mnist => load_mnist(dir, split),
        Arch::Cifar => load_cifar10(dir, split),
    }
}

/// Default dataset directory for `arch` under the data root.
pub fn default_data_dir(arch: Arch) -> Option<PathBuf> {
    let root = std::env::var_os(DATA_ROOT_ENV)?;
    Some(PathBuf::from(root).join(match arch {
        Arch::Mnist => "mnist",
        Arch::Cifar => "cifar10",
    }))
}

/// On-disk record of per-channel train statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationCache {
    pub arch: String,
    pub train_count: usize,
    pub labels_sha256: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationCache {
    pub fn normalization(&self) -> Result<Normalization> {
        Ok(Normalization::new(self.mean.clone(), self.std.clone())?)
    }
}

/// Train-split statistics, read from `cache` when it was produced from the
/// same training set and computed (then cached) otherwise.
pub fn train_normalization(arch: Arch, train: &Dataset, cache: &Path) -> Result<NormalizationCache> {
    let labels_sha256 = sha256_hex(&train.labels);
    if let Ok(text) = fs::read_to_string(cache) {
        if let Ok(c) = serde_json::from_str::<NormalizationCache>(&text) {
            if c.arch == arch.tag() && c.train_count == train.len() && c.labels_sha256 == labels_sha256 {
                return Ok(c);
            }
        }
    }
    let (mean, std) = train.channel_stats();
    let c = NormalizationCache {
        arch: arch.tag().into(),
        train_count: train.len(),
        labels_sha256,
        mean,
        std,
    };
    write_atomic(cache, serde_json::to_string_pretty(&c).expect("serializable").as_bytes())?;
    Ok(c)
}

/// Writes via a sibling temporary file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| LabError::io(format!("creating {}", parent.display()), e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| LabError::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(format!("renaming to {}", path.display()), e))
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<String> {
    let bytes = ckpt.encode();
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Loads a checkpoint and returns it with the SHA-256 of its bytes.
pub fn load_checkpoint(path: &Path) -> Result<(ModelCheckpoint, String)> {
    if !path.exists() {
        return Err(LabError::MissingPath(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| LabError::io(format!("reading {}", path.display()), e))?;
    let ckpt = ModelCheckpoint::decode(&bytes).map_err(|e| LabError::user(format!("{}: {e}", path.display())))?;
    Ok((ckpt, sha256_hex(&bytes)))
}
