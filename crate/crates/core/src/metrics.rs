//! Representational and topographic analyses of trained networks.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::TopoGrid;
use crate::model::{ModelSpec, NUM_CLASSES};
use crate::spatial::DEGENERATE_VARIANCE;
use crate::tensor::{gemm, Tensor, Transpose};

/// Correlation thresholds for the co-localization analysis.
pub const COLOCALIZATION_ALPHAS: [f64; 6] = [0.1, 0.3, 0.5, 0.6, 0.7, 0.8];
pub const ENTROPY_BINS: usize = 30;
pub const CALIBRATION_BINS: usize = 15;

/// One row of the long-format result table shared by every analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub model_id: String,
    pub constraint: &'static str,
    pub lambda: f64,
    pub seed: u64,
    pub metric: String,
    pub param1: String,
    pub param2: String,
    /// `None` where the quantity is undefined (e.g. no qualifying pairs).
    pub value: Option<f64>,
}

impl MetricRow {
    pub fn new(spec: &ModelSpec, metric: &str, param1: impl ToString, param2: impl ToString, value: Option<f64>) -> Self {
        Self {
            model_id: spec.id(),
            constraint: spec.constraint.tag(),
            lambda: spec.lambda,
            seed: spec.seed,
            metric: metric.to_string(),
            param1: param1.to_string(),
            param2: param2.to_string(),
            value,
        }
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation; `None` when either input has (near-)zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson: length mismatch");
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let n = x.len() as f64;
    if sxx / n < DEGENERATE_VARIANCE || syy / n < DEGENERATE_VARIANCE {
        return None;
    }
    Some((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

pub fn cosine(x: &[f64], y: &[f64]) -> Option<f64> {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = libm::sqrt(x.iter().map(|a| a * a).sum());
    let ny = libm::sqrt(y.iter().map(|a| a * a).sum());
    if nx == 0.0 || ny == 0.0 {
        return None;
    }
    Some((dot / (nx * ny)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Cosine,
    Pearson,
}

impl Similarity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(Similarity::Cosine),
            "pearson" => Some(Similarity::Pearson),
            _ => None,
        }
    }

    fn apply(self, x: &[f64], y: &[f64]) -> Option<f64> {
        match self {
            Similarity::Cosine => cosine(x, y),
            Similarity::Pearson => pearson(x, y),
        }
    }
}

/// Pairwise similarity of class prototypes (rows of the fc2 weights).
#[derive(Debug, Clone, PartialEq)]
pub struct Rsm {
    pub size: usize,
    pub values: Vec<f64>,
    /// Rows whose similarity is undefined; their off-diagonal entries are 0.
    pub degenerate_rows: Vec<usize>,
}

impl Rsm {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    /// Strict upper triangle, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.size;
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect()
    }
}

pub fn compute_rsm(prototypes: &Tensor, similarity: Similarity) -> Rsm {
    let n = prototypes.rows();
    let mut values = vec![0.0; n * n];
    let mut degenerate_rows = Vec::new();
    for i in 0..n {
        if similarity.apply(prototypes.row(i), prototypes.row(i)).is_none() {
            degenerate_rows.push(i);
        }
    }
    for i in 0..n {
        for j in 0..n {
            values[i * n + j] = match similarity.apply(prototypes.row(i), prototypes.row(j)) {
                Some(s) => s,
                None if i == j => 1.0,
                None => 0.0,
            };
        }
    }
    Rsm {
        size: n,
        values,
        degenerate_rows,
    }
}

/// Cosine similarity of the strict upper triangles of two RSMs.
pub fn second_order_isomorphism(a: &Rsm, b: &Rsm) -> Result<f64> {
    if a.size != b.size {
        return Err(Error::shape("second_order_isomorphism", "RSM sizes differ"));
    }
    cosine(&a.upper_triangle(), &b.upper_triangle())
        .ok_or_else(|| Error::input("RSM upper triangle is all zeros"))
}

/// Per-unit Shannon entropy (nats) of the histogram of each column of
/// `acts` (`[samples, units]`), with `bins` equal-width bins spanning the
/// column's range. Constant columns have entropy 0.
pub fn unit_entropy(acts: &Tensor, bins: usize) -> Vec<f64> {
    let (n, u) = (acts.rows(), acts.cols());
    let bins = bins.max(1);
    let mut out = Vec::with_capacity(u);
    let mut counts = vec![0usize; bins];
    for j in 0..u {
        let col = (0..n).map(|s| acts.data()[s * u + j]);
        let (lo, hi) = col.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if !(hi > lo) {
            out.push(0.0);
            continue;
        }
        counts.iter_mut().for_each(|c| *c = 0);
        let width = (hi - lo) / bins as f64;
        for v in col {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let h: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * libm::log(p)
            })
            .sum();
        out.push(h);
    }
    out
}

/// Per-unit fraction of samples whose (post-ReLU) activation is ≤ 0.
pub fn poz(post_relu: &Tensor) -> Vec<f64> {
    let (n, u) = (post_relu.rows(), post_relu.cols());
    (0..u)
        .map(|j| (0..n).filter(|&s| post_relu.data()[s * u + j] <= 0.0).count() as f64 / n as f64)
        .collect()
}

/// Pearson correlations between the `count` vectors of length `len` laid
/// out by `at(vector, position)`. Returns the `count × count` matrix (unit
/// diagonal, zero rows/columns for degenerate vectors) and the degenerate
/// indices.
fn correlation_matrix(count: usize, len: usize, at: impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<usize>) {
    // z[v, p]: centered, unit-norm profiles
    let mut z = vec![0.0; count * len];
    let mut degenerate = Vec::new();
    for v in 0..count {
        let row = &mut z[v * len..(v + 1) * len];
        for (p, x) in row.iter_mut().enumerate() {
            *x = at(v, p);
        }
        let m = mean(row);
        row.iter_mut().for_each(|x| *x -= m);
        let ss: f64 = row.iter().map(|x| x * x).sum();
        if ss / len as f64 <= DEGENERATE_VARIANCE {
            degenerate.push(v);
            row.iter_mut().for_each(|x| *x = 0.0);
        } else {
            let s = 1.0 / libm::sqrt(ss);
            row.iter_mut().for_each(|x| *x *= s);
        }
    }
    let mut r = vec![0.0; count * count];
    gemm(count, len, count, 1.0, &z, Transpose::No, &z, Transpose::Yes, 0.0, &mut r);
    for x in r.iter_mut() {
        *x = x.clamp(-1.0, 1.0);
    }
    for v in 0..count {
        if !degenerate.contains(&v) {
            r[v * count + v] = 1.0;
        }
    }
    (r, degenerate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationKind {
    InWeight,
    Activation,
}

impl CorrelationKind {
    pub fn tag(self) -> &'static str {
        match self {
            CorrelationKind::InWeight => "in_weight",
            CorrelationKind::Activation => "activation",
        }
    }
}

/// Correlation structure of the topographic layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationField {
    pub kind: CorrelationKind,
    /// Full `units × units` correlation matrix.
    pub matrix: Vec<f64>,
    /// Mean correlation of each unit with its Moore neighbors (R_i).
    pub neighbor_mean: Vec<f64>,
    /// Every unordered pair `i < j`, in row order.
    pub pairs: Vec<f64>,
    /// Units whose profile is (near-)constant; their correlations are 0.
    pub degenerate: Vec<usize>,
}

impl CorrelationField {
    fn from_matrix(kind: CorrelationKind, matrix: Vec<f64>, degenerate: Vec<usize>, grid: &TopoGrid) -> Self {
        let n = grid.unit_count();
        let neighbor_mean = (0..n)
            .map(|i| {
                let s = grid.moore(i);
                s.iter().map(|&j| matrix[i * n + j]).sum::<f64>() / s.len().max(1) as f64
            })
            .collect();
        let pairs = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| matrix[i * n + j])
            .collect();
        Self {
            kind,
            matrix,
            neighbor_mean,
            pairs,
            degenerate,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.neighbor_mean.len() + j]
    }

    /// Fraction of unordered pairs with correlation at least `threshold`.
    pub fn fraction_at_least(&self, threshold: f64) -> f64 {
        self.pairs.iter().filter(|&&r| r >= threshold).count() as f64 / self.pairs.len().max(1) as f64
    }
}

/// Pearson correlation between the afferent weight vectors (rows of the
/// `[units, fan_in]` fc1 matrix).
pub fn neighbor_weight_correlation(weights: &Tensor, grid: &TopoGrid) -> Result<CorrelationField> {
    if weights.ndim() != 2 || weights.rows() != grid.unit_count() {
        return Err(Error::shape("neighbor_weight_correlation", crate::error::fmt_shape(weights.shape())));
    }
    let d = weights.cols();
    let (m, deg) = correlation_matrix(grid.unit_count(), d, |v, p| weights.data()[v * d + p]);
    Ok(CorrelationField::from_matrix(CorrelationKind::InWeight, m, deg, grid))
}

/// Pearson correlation between unit activation profiles over samples
/// (columns of `[samples, units]`).
pub fn activation_correlations(acts: &Tensor, grid: &TopoGrid) -> Result<CorrelationField> {
    if acts.ndim() != 2 || acts.cols() != grid.unit_count() {
        return Err(Error::shape("activation_correlations", crate::error::fmt_shape(acts.shape())));
    }
    let (n, u) = (acts.rows(), acts.cols());
    let (m, deg) = correlation_matrix(u, n, |v, p| acts.data()[p * u + v]);
    Ok(CorrelationField::from_matrix(CorrelationKind::Activation, m, deg, grid))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Colocalization {
    /// Mean grid distance over connected pairs; `None` when no pair qualifies.
    pub mean_distance: Option<f64>,
    pub pairs: usize,
}

fn connected_pairs(field: &CorrelationField, alpha: f64) -> Vec<(usize, usize)> {
    let n = field.neighbor_mean.len();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| field.get(i, j) > alpha)
        .collect()
}

/// Mean grid distance between units whose correlation exceeds `alpha`.
pub fn colocalization_distance(field: &CorrelationField, grid: &TopoGrid, alpha: f64) -> Colocalization {
    let pairs = connected_pairs(field, alpha);
    let mean_distance = (!pairs.is_empty())
        .then(|| pairs.iter().map(|&(i, j)| grid.distance(i, j)).sum::<f64>() / pairs.len() as f64);
    Colocalization {
        mean_distance,
        pairs: pairs.len(),
    }
}

/// Same statistic with unit indices assigned to grid cells at random,
/// averaged over `permutations` assignments.
pub fn colocalization_baseline<R: Rng + ?Sized>(
    field: &CorrelationField,
    grid: &TopoGrid,
    alpha: f64,
    permutations: usize,
    rng: &mut R,
) -> Colocalization {
    let pairs = connected_pairs(field, alpha);
    if pairs.is_empty() || permutations == 0 {
        return Colocalization {
            mean_distance: None,
            pairs: pairs.len(),
        };
    }
    let mut perm: Vec<usize> = (0..grid.unit_count()).collect();
    let mut total = 0.0;
    for _ in 0..permutations {
        perm.shuffle(rng);
        total += pairs.iter().map(|&(i, j)| grid.distance(perm[i], perm[j])).sum::<f64>() / pairs.len() as f64;
    }
    Colocalization {
        mean_distance: Some(total / permutations as f64),
        pairs: pairs.len(),
    }
}

/// Moran's I of one activation map with binary Moore weights; `None` for a
/// constant map.
pub fn morans_i(map: &[f64], grid: &TopoGrid) -> Option<f64> {
    let n = grid.unit_count();
    assert_eq!(map.len(), n, "morans_i: one value per unit");
    let m = mean(map);
    let denom: f64 = map.iter().map(|x| (x - m) * (x - m)).sum();
    if denom <= DEGENERATE_VARIANCE * n as f64 {
        return None;
    }
    let num: f64 = grid.ordered_pairs().map(|(i, j)| (map[i] - m) * (map[j] - m)).sum();
    let w = grid.ordered_pair_count() as f64;
    Some(n as f64 / w * num / denom)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoranSummary {
    /// Mean over the non-constant maps.
    pub mean: f64,
    pub maps: usize,
    pub constant_maps: usize,
}

/// Moran's I of each row of `[samples, units]`, averaged.
pub fn mean_morans_i(acts: &Tensor, grid: &TopoGrid) -> MoranSummary {
    let mut total = 0.0;
    let (mut maps, mut constant_maps) = (0, 0);
    for s in 0..acts.rows() {
        match morans_i(acts.row(s), grid) {
            Some(i) => {
                total += i;
                maps += 1;
            }
            None => constant_maps += 1,
        }
    }
    MoranSummary {
        mean: if maps > 0 { total / maps as f64 } else { 0.0 },
        maps,
        constant_maps,
    }
}

/// Eigenvalues of the column covariance of `m` (`[samples, features]`),
/// descending.
pub fn covariance_spectrum(m: &Tensor) -> Result<Vec<f64>> {
    if m.ndim() != 2 || m.rows() < 2 {
        return Err(Error::shape("covariance_spectrum", "need a matrix with at least two rows"));
    }
    let (n, d) = (m.rows(), m.cols());
    let mut centered = m.data().to_vec();
    for j in 0..d {
        let mu = (0..n).map(|s| centered[s * d + j]).sum::<f64>() / n as f64;
        for s in 0..n {
            centered[s * d + j] -= mu;
        }
    }
    let mut cov = vec![0.0; d * d];
    gemm(d, n, d, 1.0 / (n - 1) as f64, &centered, Transpose::Yes, &centered, Transpose::No, 0.0, &mut cov);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));
    let mut vals: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    Ok(vals)
}

/// `(Σλ)² / Σλ²` over the covariance spectrum of `m`.
pub fn effective_dimensionality(m: &Tensor) -> Result<f64> {
    let vals = covariance_spectrum(m)?;
    let s: f64 = vals.iter().sum();
    let s2: f64 = vals.iter().map(|v| v * v).sum();
    if s2 == 0.0 {
        return Err(Error::input("effective dimensionality of a constant matrix"));
    }
    Ok(s * s / s2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub ece: f64,
    /// Mean difference between the largest and second-largest logit.
    pub logit_gap: f64,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

/// Expected calibration error over `bins` equal-width bins of the softmax
/// top-1 probability, plus the mean logit gap. `logits` is `[N, 10]`.
pub fn calibration(logits: &[f64], labels: &[u8], bins: usize) -> Calibration {
    let n = labels.len();
    assert_eq!(logits.len(), n * NUM_CLASSES, "calibration: logits/labels mismatch");
    let bins = bins.max(1);
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    let (mut gap, mut hits, mut conf_total) = (0.0, 0usize, 0.0);
    for (row, &label) in logits.chunks_exact(NUM_CLASSES).zip(labels) {
        let top = crate::model::argmax(row);
        let second = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != top)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        gap += row[top] - second;
        let z: f64 = row.iter().map(|v| libm::exp(v - row[top])).sum();
        let p = 1.0 / z;
        let b = ((p * bins as f64) as usize).min(bins - 1);
        let hit = top == label as usize;
        conf_sum[b] += p;
        hit_sum[b] += if hit { 1.0 } else { 0.0 };
        count[b] += 1;
        hits += hit as usize;
        conf_total += p;
    }
    let nf = n.max(1) as f64;
    let ece = (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (count[b] as f64 / nf) * ((hit_sum[b] - conf_sum[b]) / count[b] as f64).abs())
        .sum();
    Calibration {
        ece,
        logit_gap: gap / nf,
        accuracy: hits as f64 / nf,
        mean_confidence: conf_total / nf,
    }
}

/// Spearman rank correlation (average ranks for ties); `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(core::cmp::Ordering::Equal));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}
