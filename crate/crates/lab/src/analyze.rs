//! Analysis passes over the checkpoints listed in a manifest.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use topo_core::data::{normalize, Dataset, Normalization, Split};
use topo_core::grid::TopoGrid;
use topo_core::metrics::{
    activation_correlations, calibration, colocalization_baseline, colocalization_distance, effective_dimensionality,
    mean, mean_morans_i, neighbor_weight_correlation, poz, spearman, unit_entropy, CorrelationField, MetricRow,
    Similarity, CALIBRATION_BINS,
};
use topo_core::model::{Arch, Model, Stage};
use topo_core::perturb::{noise_accuracy_curve, weight_noise_analysis, NoiseKind};
use topo_core::retinotopy::{tuning_report, StimulusGeometry};
use topo_core::rng::{purpose, stream};
use topo_core::tensor::Tensor;

use crate::config::{AnalysisSection, Ladders};
use crate::io::{self, load_checkpoint};
use crate::sweep::{checkpoint_spec_hash, Manifest};
use crate::table::{
    write_table, MetricRecord, NoiseRecord, WeightNoiseRecord, METRIC_COLUMNS, NOISE_COLUMNS, WEIGHT_NOISE_COLUMNS,
};
use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Rsm,
    Noise,
    Entropy,
    Topo,
    Retino,
    Calib,
    Ed,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Rsm,
        Family::Noise,
        Family::Entropy,
        Family::Topo,
        Family::Retino,
        Family::Calib,
        Family::Ed,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Family::Rsm => "rsm",
            Family::Noise => "noise",
            Family::Entropy => "entropy",
            Family::Topo => "topo",
            Family::Retino => "retino",
            Family::Calib => "calib",
            Family::Ed => "ed",
        }
    }

    /// Parses `all` or a comma-separated list of family tags.
    pub fn parse_list(s: &str) -> Result<Vec<Family>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim) {
            if part == "all" {
                return Ok(Self::ALL.to_vec());
            }
            let f = Self::ALL
                .into_iter()
                .find(|f| f.tag() == part)
                .ok_or_else(|| LabError::user(format!("unknown analysis {part:?}; expected all|rsm|noise|entropy|topo|retino|calib|ed")))?;
            if !out.contains(&f) {
                out.push(f);
            }
        }
        Ok(out)
    }

    fn needs_activations(self) -> bool {
        matches!(self, Family::Entropy | Family::Topo | Family::Ed)
    }
}

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub families: Vec<Family>,
    pub workers: usize,
    pub data_dir: Option<PathBuf>,
    pub analysis: AnalysisSection,
    pub ladders: Ladders,
}

/// Rows produced by one family, possibly over many models.
#[derive(Debug, Clone, Default)]
pub struct FamilyRows {
    pub metrics: Vec<MetricRecord>,
    pub noise: Vec<NoiseRecord>,
    pub weight_noise: Vec<WeightNoiseRecord>,
}

impl FamilyRows {
    fn extend(&mut self, other: FamilyRows) {
        self.metrics.extend(other.metrics);
        self.noise.extend(other.noise);
        self.weight_noise.extend(other.weight_noise);
    }
}

/// Test-set inputs shared by every model.
pub struct EvalData {
    pub test: Dataset,
    pub raw_test: Dataset,
    pub norm: Normalization,
}

pub struct Analyzer<'a> {
    pub data: &'a EvalData,
    pub analysis: &'a AnalysisSection,
    pub ladders: &'a Ladders,
    pub similarity: Similarity,
    pub grid: TopoGrid,
}

fn push(rows: &mut Vec<MetricRecord>, model: &Model, metric: &str, p1: impl ToString, p2: impl ToString, v: Option<f64>) {
    rows.push(MetricRecord::from(&MetricRow::new(&model.spec, metric, p1, p2, v)));
}

fn histogram(values: &[f64]) -> Vec<(f64, f64, usize)> {
    // 20 bins of width 0.1 over [-1, 1]; the last bin is closed.
    (0..20)
        .map(|b| {
            let lo = -1.0 + b as f64 * 0.1;
            let hi = lo + 0.1;
            let k = values
                .iter()
                .filter(|&&v| {
                    let idx = (((v + 1.0) / 0.1).floor() as i64).clamp(0, 19);
                    idx == b
                })
                .count();
            (lo, hi, k)
        })
        .collect()
}

fn correlation_rows(rows: &mut Vec<MetricRecord>, model: &Model, field: &CorrelationField, thresholds: &[f64]) {
    let k = field.kind.tag();
    push(rows, model, &format!("{k}_neighbor_correlation"), "mean", "", Some(mean(&field.neighbor_mean)));
    for &t in thresholds {
        push(rows, model, &format!("{k}_pair_fraction"), t, "", Some(field.fraction_at_least(t)));
    }
    for (lo, hi, n) in histogram(&field.pairs) {
        push(rows, model, &format!("{k}_pair_histogram"), format!("{lo:.1}"), format!("{hi:.1}"), Some(n as f64));
    }
    for (u, r) in field.neighbor_mean.iter().enumerate() {
        push(rows, model, &format!("{k}_unit_neighbor_correlation"), u, "", Some(*r));
    }
    push(rows, model, &format!("{k}_degenerate_units"), "", "", Some(field.degenerate.len() as f64));
}

impl Analyzer<'_> {
    fn pre_relu(&self, model: &Model) -> Result<Tensor> {
        Ok(model.fc1_activations(&self.data.test.images, self.data.test.len(), Stage::PreRelu)?)
    }

    /// Runs `family` on one model.
    pub fn run(&self, model: &Model, family: Family, pre: Option<&Tensor>) -> Result<FamilyRows> {
        let mut out = FamilyRows::default();
        let rows = &mut out.metrics;
        let test = &self.data.test;
        let a = self.analysis;
        let owned = match pre {
            None if family.needs_activations() => Some(self.pre_relu(model)?),
            _ => None,
        };
        let empty = Tensor::zeros(&[1, 1]);
        let pre = pre.or(owned.as_ref()).unwrap_or(&empty);
        match family {
            Family::Rsm => {
                let wn = weight_noise_analysis(
                    model,
                    &test.images,
                    &test.labels,
                    &self.ladders.weight,
                    a.weight_repetitions,
                    self.similarity,
                    a.seed,
                )?;
                for r in &wn {
                    push(rows, model, "soi", r.sigma_level, r.repetition, Some(r.soi));
                }
                for r in &wn {
                    push(rows, model, "weight_noise_accuracy", r.sigma_level, r.repetition, Some(r.accuracy));
                }
                out.weight_noise = wn.iter().map(WeightNoiseRecord::from).collect();
            }
            Family::Noise => {
                for (kind, ladder) in [
                    (NoiseKind::White, &self.ladders.white),
                    (NoiseKind::Pink, &self.ladders.pink),
                    (NoiseKind::SaltPepper, &self.ladders.salt_pepper),
                ] {
                    let curve = noise_accuracy_curve(
                        model,
                        &self.data.raw_test,
                        &self.data.norm,
                        kind,
                        ladder,
                        a.noise_repetitions,
                        a.seed,
                    )?;
                    let mut levels = vec![0.0];
                    levels.extend(ladder.iter().copied());
                    let means: Vec<f64> = levels
                        .iter()
                        .map(|&l| {
                            let v: Vec<f64> = curve
                                .iter()
                                .filter(|r| r.intensity == l)
                                .map(|r| r.normalized_accuracy)
                                .collect();
                            mean(&v)
                        })
                        .collect();
                    for (l, m) in levels.iter().zip(&means) {
                        push(rows, model, "noise_normalized_accuracy", kind.tag(), l, Some(*m));
                    }
                    push(rows, model, "noise_spearman", kind.tag(), "", spearman(ladder, &means[1..]));
                    out.noise.extend(curve.iter().map(NoiseRecord::from));
                }
            }
            Family::Entropy => {
                let mut bins = vec![a.entropy_bins];
                bins.extend(a.entropy_bin_sensitivity.iter().filter(|b| **b != a.entropy_bins));
                for (k, &b) in bins.iter().enumerate() {
                    let e = unit_entropy(pre, b);
                    push(rows, model, "entropy_mean", b, "", Some(mean(&e)));
                    if k == 0 {
                        for (u, v) in e.iter().enumerate() {
                            push(rows, model, "entropy_unit", u, b, Some(*v));
                        }
                    }
                }
                let post = relu(pre);
                let p = poz(&post);
                push(rows, model, "poz_mean", "", "", Some(mean(&p)));
                for (u, v) in p.iter().enumerate() {
                    push(rows, model, "poz_unit", u, "", Some(*v));
                }
            }
            Family::Topo => {
                let m = mean_morans_i(pre, &self.grid);
                push(rows, model, "morans_i", "pre_relu", "", Some(m.mean));
                push(rows, model, "morans_i_constant_maps", "pre_relu", "", Some(m.constant_maps as f64));
                let act = activation_correlations(pre, &self.grid)?;
                correlation_rows(rows, model, &act, &a.correlation_thresholds);
                let wf = neighbor_weight_correlation(model.fc1_weights(), &self.grid)?;
                correlation_rows(rows, model, &wf, &a.correlation_thresholds);
                for &alpha in &a.colocalization_alphas {
                    let c = colocalization_distance(&act, &self.grid, alpha);
                    push(rows, model, "colocalization_distance", alpha, "", c.mean_distance);
                    push(rows, model, "colocalization_pairs", alpha, "", Some(c.pairs as f64));
                    let mut rng = stream(a.seed, &[purpose::COLOCALIZATION, model.spec.seed]);
                    let b = colocalization_baseline(&act, &self.grid, alpha, a.colocalization_permutations, &mut rng);
                    push(rows, model, "colocalization_baseline", alpha, "", b.mean_distance);
                }
            }
            Family::Retino => {
                let rep = tuning_report(model, &self.data.norm, &StimulusGeometry::default())?;
                rows.extend(rep.rows(&model.spec).iter().map(MetricRecord::from));
            }
            Family::Calib => {
                let out = model.evaluate(&test.images, test.len(), 256)?;
                let c = calibration(&out.logits, &test.labels, CALIBRATION_BINS);
                push(rows, model, "ece", CALIBRATION_BINS, "", Some(c.ece));
                push(rows, model, "logit_gap", "", "", Some(c.logit_gap));
                push(rows, model, "test_accuracy", "", "", Some(c.accuracy));
                push(rows, model, "mean_confidence", "", "", Some(c.mean_confidence));
            }
            Family::Ed => {
                let w = effective_dimensionality(model.fc1_weights()).ok();
                push(rows, model, "effective_dimensionality", "fc1_weights", "", w);
                let act = effective_dimensionality(pre).ok();
                push(rows, model, "effective_dimensionality", "fc1_activations", "pre_relu", act);
            }
        }
        Ok(out)
    }
}

fn relu(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Loads and verifies every checkpoint listed in `manifest`.
pub fn load_models(manifest: &Manifest, exp_dir: &Path) -> Result<Vec<Model>> {
    if manifest.entries.is_empty() {
        return Err(LabError::user(format!("manifest in {} lists no checkpoints", exp_dir.display())));
    }
    let mut models = Vec::new();
    let mut problems = Vec::new();
    for e in &manifest.entries {
        let (ckpt, sha) = load_checkpoint(&exp_dir.join(&e.checkpoint))?;
        let sh = checkpoint_spec_hash(&ckpt);
        if sha != e.checkpoint_sha256 {
            problems.push(format!("{}: checkpoint sha256 {sha} != manifest {}", e.model_id, e.checkpoint_sha256));
        }
        if sh != e.spec_hash || ckpt.spec.id() != e.model_id {
            problems.push(format!(
                "{}: checkpoint holds {} (spec hash {sh}), manifest expects spec hash {}",
                e.model_id,
                ckpt.spec.id(),
                e.spec_hash
            ));
        }
        models.push(ckpt.to_model()?);
    }
    if !problems.is_empty() {
        return Err(LabError::user(format!("checkpoint/spec hash mismatch:\n  {}", problems.join("\n  "))));
    }
    Ok(models)
}

pub fn load_eval_data(manifest: &Manifest, data_dir: Option<&Path>) -> Result<EvalData> {
    let arch = Arch::parse(&manifest.arch).ok_or_else(|| LabError::user(format!("unknown arch {:?}", manifest.arch)))?;
    let dir = data_dir.map(Path::to_path_buf).unwrap_or_else(|| manifest.data_dir.clone());
    let mut raw_test = io::load(arch, &dir, Split::Test)?;
    if let Some(n) = manifest.test_limit {
        raw_test = raw_test.head(n);
    }
    let norm = manifest.normalization.normalization()?;
    Ok(EvalData {
        test: normalize(&raw_test, &norm)?,
        raw_test,
        norm,
    })
}

#[derive(Debug, Clone)]
pub struct FamilySummary {
    pub family: Family,
    pub rows: usize,
    pub models: usize,
    pub dir: PathBuf,
}

/// Runs the requested families over every model in the manifest at
/// `manifest_path` and writes `<exp>/<family>/metrics.{csv,json}`.
pub fn run(manifest_path: &Path, opts: &AnalyzeOptions) -> Result<Vec<FamilySummary>> {
    let manifest = Manifest::load(manifest_path)?;
    let exp_dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let models = load_models(&manifest, &exp_dir)?;
    let data = load_eval_data(&manifest, opts.data_dir.as_deref())?;
    let similarity = Similarity::parse(&opts.analysis.similarity)
        .ok_or_else(|| LabError::user(format!("unknown similarity {:?}", opts.analysis.similarity)))?;
    let analyzer = Analyzer {
        data: &data,
        analysis: &opts.analysis,
        ladders: &opts.ladders,
        similarity,
        grid: TopoGrid::standard(),
    };
    let per_model: Vec<Mutex<Option<Result<Vec<FamilyRows>>>>> = models.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..opts.workers.clamp(1, models.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(model) = models.get(i) else { break };
                let res = (|| {
                    let pre = if opts.families.iter().any(|f| f.needs_activations()) {
                        Some(analyzer.pre_relu(model)?)
                    } else {
                        None
                    };
                    let mut out = Vec::new();
                    for &f in &opts.families {
                        log::info!("{}: {}", model.spec.id(), f.tag());
                        out.push(analyzer.run(model, f, pre.as_ref())?);
                    }
                    Ok(out)
                })();
                *per_model[i].lock().expect("result lock") = Some(res);
            });
        }
    });
    let mut merged: Vec<FamilyRows> = opts.families.iter().map(|_| FamilyRows::default()).collect();
    for (slot, model) in per_model.into_iter().zip(&models) {
        let res = slot.into_inner().expect("result lock").expect("every model visited");
        let rows = res.map_err(|e| LabError::Internal(format!("{}: {e}", model.spec.id())))?;
        for (m, r) in merged.iter_mut().zip(rows) {
            m.extend(r);
        }
    }
    let mut summary = Vec::new();
    for (&family, rows) in opts.families.iter().zip(&merged) {
        let dir = exp_dir.join(family.tag());
        write_table(&dir, "metrics", &METRIC_COLUMNS, &rows.metrics)?;
        if family == Family::Noise {
            write_table(&dir, "noise_curve", &NOISE_COLUMNS, &rows.noise)?;
        }
        if family == Family::Rsm {
            write_table(&dir, "weight_noise", &WEIGHT_NOISE_COLUMNS, &rows.weight_noise)?;
        }
        summary.push(FamilySummary {
            family,
            rows: rows.metrics.len(),
            models: models.len(),
            dir,
        });
    }
    Ok(summary)
}
