//! In-memory datasets, the IDX and CIFAR-10 binary codecs, normalization and
//! deterministic batching.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine normalization `x -> (x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::input("normalization mean/std lengths differ"));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::input(alloc::format!("normalization std must be positive, got {s}")));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Normalizes one channel-major image in place.
    pub fn apply(&self, image: &mut [f64]) {
        let plane = image.len() / self.mean.len();
        for (c, chunk) in image.chunks_exact_mut(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

/// Images stored channel-major (`[count, C, H, W]`) with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub split: Split,
    /// `Some` once [`normalize`] has been applied.
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        labels: Vec<u8>,
        (channels, height, width): (usize, usize, usize),
        split: Split,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::input(alloc::format!(
                "{} pixel values do not match {} labels of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= 10) {
            return Err(Error::input(alloc::format!("label {l} outside [0,10)")));
        }
        Ok(Self {
            images,
            labels,
            channels,
            height,
            width,
            split,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Copies the given images (in order) into one contiguous buffer.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let n = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i] as usize);
        }
        (images, labels)
    }

    /// The first `count` examples (all of them if `count` exceeds the size).
    pub fn head(&self, count: usize) -> Self {
        let count = count.min(self.len());
        Self {
            images: self.images[..count * self.image_len()].to_vec(),
            labels: self.labels[..count].to_vec(),
            normalization: self.normalization.clone(),
            ..*self
        }
    }

    /// Per-channel mean and (population) standard deviation of the pixels.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let plane = self.height * self.width;
        let mut mean = vec![0.0; self.channels];
        let mut std = vec![0.0; self.channels];
        let count = (self.len() * plane) as f64;
        for c in 0..self.channels {
            let mut sum = 0.0;
            for i in 0..self.len() {
                sum += self.image(i)[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
            let m = sum / count;
            let mut sq = 0.0;
            for i in 0..self.len() {
                sq += self.image(i)[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
            mean[c] = m;
            std[c] = libm::sqrt(sq / count);
        }
        (mean, std)
    }
}

/// Applies `(x - mean)/std` per channel and records the constants.
pub fn normalize(ds: &Dataset, norm: &Normalization) -> Result<Dataset> {
    if norm.mean.len() != ds.channels {
        return Err(Error::input(alloc::format!(
            "normalization has {} channels, dataset has {}",
            norm.mean.len(),
            ds.channels
        )));
    }
    let norm = Normalization::new(norm.mean.clone(), norm.std.clone())?;
    let mut out = ds.clone();
    let n = ds.image_len();
    for img in out.images.chunks_exact_mut(n) {
        norm.apply(img);
    }
    out.normalization = Some(norm);
    Ok(out)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(alloc::format!("{what}: truncated header")))
}

/// Decoded IDX image file: `count` images of `rows × cols` bytes scaled to
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(alloc::format!(
            "idx images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(Error::format(alloc::format!(
            "idx images: truncated, {} bytes for {count} images of {rows}x{cols}",
            bytes.len()
        )));
    }
    let pixels = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(alloc::format!(
            "idx labels: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "idx labels")? as usize;
    if bytes.len() < 8 + count {
        return Err(Error::format(alloc::format!("idx labels: truncated, {} bytes for {count} labels", bytes.len())));
    }
    Ok(bytes[8..8 + count].to_vec())
}

pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Pairs decoded IDX images and labels into a single-channel dataset.
pub fn mnist_from_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let imgs = parse_idx_images(images)?;
    let labs = parse_idx_labels(labels)?;
    if imgs.count != labs.len() {
        return Err(Error::format(alloc::format!(
            "idx count mismatch: {} images vs {} labels",
            imgs.count,
            labs.len()
        )));
    }
    Dataset::new(imgs.pixels, labs, (1, imgs.rows, imgs.cols), split)
}

/// Decodes a CIFAR-10 binary batch (records of one label byte followed by
/// 3072 channel-major RGB bytes).
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<(Vec<f64>, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::format(alloc::format!(
            "cifar batch: length {} is not a positive multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        if rec[0] >= 10 {
            return Err(Error::format(alloc::format!("cifar batch: label byte {} outside [0,10)", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

pub fn encode_cifar_batch(records: &[(u8, &[u8])]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_LEN);
    for (label, px) in records {
        out.push(*label);
        out.extend_from_slice(px);
    }
    out
}

/// Shuffled index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`: the seed keys a ChaCha stream and the epoch selects the
/// stream position. The final partial batch is kept.
pub fn epoch_batches(count: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Human-readable summary used in diagnostics.
pub fn describe(ds: &Dataset) -> String {
    alloc::format!(
        "{} images {}x{}x{} ({:?}{})",
        ds.len(),
        ds.channels,
        ds.height,
        ds.width,
        ds.split,
        if ds.normalization.is_some() { ", normalized" } else { "" }
    )
}
