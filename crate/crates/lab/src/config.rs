//! Experiment configuration: a TOML file, command-line overrides, and
//! validation with line-numbered diagnostics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use topo_core::metrics::{Similarity, COLOCALIZATION_ALPHAS, ENTROPY_BINS};
use topo_core::model::{Arch, LAMBDA_LEVELS};
use topo_core::perturb::{PINK_LADDER, SALT_PEPPER_LADDER, WEIGHT_LADDER, WEIGHT_NOISE_REPETITIONS, WHITE_LADDER};
use topo_core::spatial::Constraint;

use crate::io::{default_data_dir, sha256_hex};
use crate::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub arch: String,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub constraints: Vec<String>,
    pub lambdas: Vec<f64>,
    pub seeds: u64,
    pub seed_base: u64,
    pub workers: usize,
    /// Desk-scale profile: batch 16 for MNIST; 10k-image subset and 10
    /// epochs for CIFAR-10. Explicit `[train]` values still win.
    pub reduced: bool,
    pub train: TrainSection,
    pub analysis: AnalysisSection,
    pub ladders: Ladders,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub similarity: String,
    pub entropy_bins: usize,
    /// Extra bin counts reported next to `entropy_bins`.
    pub entropy_bin_sensitivity: Vec<usize>,
    pub weight_repetitions: usize,
    pub noise_repetitions: usize,
    pub colocalization_permutations: usize,
    pub colocalization_alphas: Vec<f64>,
    pub correlation_thresholds: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ladders {
    pub white: Vec<f64>,
    pub pink: Vec<f64>,
    pub salt_pepper: Vec<f64>,
    pub weight: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: "default".into(),
            arch: "mnist".into(),
            data_dir: None,
            out_dir: "out".into(),
            constraints: vec!["control".into(), "ws".into(), "as".into()],
            lambdas: LAMBDA_LEVELS.to_vec(),
            seeds: 10,
            seed_base: 0,
            workers: 1,
            reduced: false,
            train: TrainSection::default(),
            analysis: AnalysisSection::default(),
            ladders: Ladders::default(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: None,
            batch_size: None,
            lr: 0.001,
            train_limit: None,
            test_limit: None,
            log_every: 50,
        }
    }
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            similarity: "cosine".into(),
            entropy_bins: ENTROPY_BINS,
            entropy_bin_sensitivity: vec![10, 50, 100],
            weight_repetitions: WEIGHT_NOISE_REPETITIONS,
            noise_repetitions: 3,
            colocalization_permutations: 1000,
            colocalization_alphas: COLOCALIZATION_ALPHAS.to_vec(),
            correlation_thresholds: vec![0.5, 0.8, 0.9, 0.95, 0.99],
            seed: 2024,
        }
    }
}

impl Default for Ladders {
    fn default() -> Self {
        Self {
            white: WHITE_LADDER.to_vec(),
            pink: PINK_LADDER.to_vec(),
            salt_pepper: SALT_PEPPER_LADDER.to_vec(),
            weight: WEIGHT_LADDER.to_vec(),
        }
    }
}

/// Where configuration text came from, for diagnostics.
#[derive(Debug, Clone, Default)]
pub struct Origin {
    file: Option<(PathBuf, String)>,
    overridden: Vec<&'static str>,
}

impl Origin {
    /// `file:line` of `key` when it was read from the file, `--flag` when it
    /// came from the command line.
    pub fn locate(&self, key: &'static str) -> String {
        let leaf = key.rsplit('.').next().unwrap_or(key);
        if self.overridden.contains(&key) {
            return format!("--{}", leaf.replace('_', "-"));
        }
        if let Some((path, text)) = &self.file {
            let line = text
                .lines()
                .position(|l| {
                    let l = l.trim_start();
                    l.strip_prefix(leaf).is_some_and(|rest| rest.trim_start().starts_with('='))
                })
                .map_or(0, |i| i + 1);
            if line > 0 {
                return format!("{}:{line}", path.display());
            }
            return format!("{}", path.display());
        }
        format!("<default {key}>")
    }

    pub fn mark(&mut self, key: &'static str) {
        self.overridden.push(key);
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<(Self, Origin)> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(1, |s| line_of(text, s.start));
            LabError::user(format!("{}:{line}: {}", path.display(), e.message()))
        })?;
        Ok((
            cfg,
            Origin {
                file: Some((path.to_path_buf(), text.to_string())),
                overridden: Vec::new(),
            },
        ))
    }

    pub fn load(path: &Path) -> Result<(Self, Origin)> {
        if !path.exists() {
            return Err(LabError::MissingPath(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }

    /// Checks every field and fills in profile-dependent defaults.
    pub fn resolve(&self, origin: &Origin) -> Result<Resolved> {
        let bad = |key: &'static str, msg: String| LabError::user(format!("{}: {key}: {msg}", origin.locate(key)));
        let arch = Arch::parse(&self.arch).ok_or_else(|| bad("arch", format!("unknown architecture {:?}", self.arch)))?;
        if self.experiment.is_empty() || self.experiment.contains(['/', '\\']) {
            return Err(bad("experiment", format!("{:?} is not a valid directory name", self.experiment)));
        }
        let mut constraints = Vec::new();
        for c in &self.constraints {
            let k = Constraint::parse(c).ok_or_else(|| bad("constraints", format!("unknown constraint {c:?}")))?;
            if !constraints.contains(&k) {
                constraints.push(k);
            }
        }
        if constraints.is_empty() {
            return Err(bad("constraints", "at least one constraint is required".into()));
        }
        for l in &self.lambdas {
            if !LAMBDA_LEVELS.contains(l) {
                return Err(bad("lambdas", format!("{l} is not one of {LAMBDA_LEVELS:?}")));
            }
        }
        if self.lambdas.is_empty() && constraints.iter().any(|c| *c != Constraint::None) {
            return Err(bad("lambdas", "constrained runs need at least one lambda".into()));
        }
        if self.seeds == 0 {
            return Err(bad("seeds", "must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(bad("workers", "must be at least 1".into()));
        }
        let data_dir = match &self.data_dir {
            Some(d) => d.clone(),
            None => default_data_dir(arch).ok_or_else(|| {
                bad(
                    "data_dir",
                    format!("no dataset path; set data_dir or {}", crate::io::DATA_ROOT_ENV),
                )
            })?,
        };
        if !data_dir.is_dir() {
            return Err(LabError::MissingPath(data_dir));
        }
        let t = &self.train;
        let (epochs, batch_size, train_limit) = match (arch, self.reduced) {
            (Arch::Mnist, false) => (15, 128, None),
            (Arch::Mnist, true) => (15, 16, None),
            (Arch::Cifar, false) => (30, 128, None),
            (Arch::Cifar, true) => (10, 128, Some(10_000)),
        };
        let epochs = t.epochs.unwrap_or(epochs);
        let batch_size = t.batch_size.unwrap_or(batch_size);
        if epochs == 0 {
            return Err(bad("train.epochs", "must be positive".into()));
        }
        if batch_size == 0 {
            return Err(bad("train.batch_size", "must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(bad("train.lr", format!("{} is not a positive learning rate", t.lr)));
        }
        let a = &self.analysis;
        let similarity = Similarity::parse(&a.similarity)
            .ok_or_else(|| bad("analysis.similarity", format!("expected cosine or pearson, got {:?}", a.similarity)))?;
        if a.entropy_bins == 0 || a.entropy_bin_sensitivity.contains(&0) {
            return Err(bad("analysis.entropy_bins", "bin counts must be positive".into()));
        }
        if a.weight_repetitions == 0 || a.noise_repetitions == 0 {
            return Err(bad("analysis.noise_repetitions", "repetitions must be positive".into()));
        }
        let ladders = &self.ladders;
        for (key, ladder, max) in [
            ("ladders.white", &ladders.white, f64::INFINITY),
            ("ladders.pink", &ladders.pink, f64::INFINITY),
            ("ladders.salt_pepper", &ladders.salt_pepper, 1.0),
            ("ladders.weight", &ladders.weight, f64::INFINITY),
        ] {
            if ladder.is_empty() || ladder.iter().any(|v| !(*v >= 0.0 && *v <= max)) {
                return Err(bad(key, format!("levels must be nonempty and within [0, {max}]")));
            }
        }
        Ok(Resolved {
            config: self.clone(),
            arch,
            constraints,
            data_dir,
            exp_dir: self.out_dir.join(&self.experiment),
            epochs,
            batch_size,
            train_limit: t.train_limit.or(train_limit),
            test_limit: t.test_limit,
            similarity,
        })
    }
}

/// A validated configuration with profile defaults applied.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub arch: Arch,
    pub constraints: Vec<Constraint>,
    pub data_dir: PathBuf,
    pub exp_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub similarity: Similarity,
}
