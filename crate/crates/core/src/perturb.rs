//! Weight-space and image-space noise interventions.
//!
//! Image noise is applied to raw `[0, 1]` pixels, clamped, and only then
//! normalized. Each image draws from its own stream derived from
//! `(seed, kind, repetition, image index)`, so results do not depend on
//! batching. The same draw is reused across the intensity ladder: the
//! white and pink fields are scaled, and salt-and-pepper masks are nested.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::fourier::{dft2, frequency, Spectrum};
use crate::metrics::{compute_rsm, second_order_isomorphism, Similarity};
use crate::model::{Model, Stage, NUM_CLASSES};
use crate::rng::{derive_seed, purpose, stream};
use crate::tensor::Tensor;

pub const WHITE_LADDER: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const PINK_LADDER: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const SALT_PEPPER_LADDER: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.4];
/// Multiples of the clean matrix's standard deviation.
pub const WEIGHT_LADDER: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
pub const WEIGHT_NOISE_REPETITIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    SaltPepper,
    WeightGaussian,
}

impl NoiseKind {
    pub fn tag(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::SaltPepper => "salt_pepper",
            NoiseKind::WeightGaussian => "weight_gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [NoiseKind::White, NoiseKind::Pink, NoiseKind::SaltPepper, NoiseKind::WeightGaussian]
            .into_iter()
            .find(|k| k.tag() == s)
    }

    fn code(self) -> u64 {
        match self {
            NoiseKind::White => 1,
            NoiseKind::Pink => 2,
            NoiseKind::SaltPepper => 3,
            NoiseKind::WeightGaussian => 4,
        }
    }

    pub fn default_ladder(self) -> &'static [f64] {
        match self {
            NoiseKind::White => &WHITE_LADDER,
            NoiseKind::Pink => &PINK_LADDER,
            NoiseKind::SaltPepper => &SALT_PEPPER_LADDER,
            NoiseKind::WeightGaussian => &WEIGHT_LADDER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub intensity: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity >= 0.0 && self.intensity.is_finite()) {
            return Err(Error::input(alloc::format!("noise intensity {} must be nonnegative", self.intensity)));
        }
        if self.kind == NoiseKind::SaltPepper && self.intensity > 1.0 {
            return Err(Error::input("salt-and-pepper proportion must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Population standard deviation of all entries.
pub fn entry_sd(t: &Tensor) -> f64 {
    let m = crate::metrics::mean(t.data());
    libm::sqrt(t.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t.len() as f64)
}

/// `w + ε` with `ε ~ N(0, (σ_level·sd(w))²)` i.i.d.
pub fn perturb_weights(w: &Tensor, sigma_level: f64, seed: u64) -> Tensor {
    let sd = sigma_level * entry_sd(w);
    let mut out = w.clone();
    if sd == 0.0 {
        return out;
    }
    let mut rng = stream(seed, &[purpose::WEIGHT_NOISE]);
    for v in out.data_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v += sd * e;
    }
    out
}

/// Zero-mean, unit-variance `h × w` field with amplitude spectrum ∝ 1/f
/// (power ∝ 1/f²) and no DC component.
pub fn pink_field<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let white: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let mut spec = dft2(&Spectrum::from_real(&white), h, w, false);
    for r in 0..h {
        for c in 0..w {
            let (fy, fx) = (frequency(r, h), frequency(c, w));
            let f = libm::sqrt(fy * fy + fx * fx);
            let gain = if f == 0.0 { 0.0 } else { 1.0 / f };
            spec.re[r * w + c] *= gain;
            spec.im[r * w + c] *= gain;
        }
    }
    let mut field = dft2(&spec, h, w, true).re;
    let m = crate::metrics::mean(&field);
    field.iter_mut().for_each(|v| *v -= m);
    let sd = libm::sqrt(field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64);
    if sd > 0.0 {
        field.iter_mut().for_each(|v| *v /= sd);
    }
    field
}

fn clamp01(img: &mut [f64]) {
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// `pixel += intensity·N(0,1)` then clamp to `[0, 1]`. `img` is one raw
/// `[C,H,W]` image.
pub fn add_white_noise<R: Rng + ?Sized>(img: &mut [f64], intensity: f64, rng: &mut R) {
    if intensity == 0.0 {
        return;
    }
    for v in img.iter_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += intensity * e;
    }
    clamp01(img);
}

/// Adds `intensity` times one pink field per channel, then clamps.
pub fn add_pink_noise<R: Rng + ?Sized>(img: &mut [f64], (c, h, w): (usize, usize, usize), intensity: f64, rng: &mut R) {
    if intensity == 0.0 {
        return;
    }
    for ch in 0..c {
        let field = pink_field(h, w, rng);
        for (v, f) in img[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&field) {
            *v += intensity * f;
        }
    }
    clamp01(img);
}

/// Sets exactly `round(proportion·H·W)` distinct pixel sites (shared by all
/// channels) to 0 or 1 with equal probability. Returns the site count.
pub fn add_salt_pepper<R: Rng + ?Sized>(
    img: &mut [f64],
    (c, h, w): (usize, usize, usize),
    proportion: f64,
    rng: &mut R,
) -> usize {
    let mask = SaltPepperMask::draw(h * w, rng);
    mask.apply(img, c, proportion)
}

struct SaltPepperMask {
    order: Vec<usize>,
    white: Vec<bool>,
}

impl SaltPepperMask {
    fn draw<R: Rng + ?Sized>(sites: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..sites).collect();
        order.shuffle(rng);
        let white = (0..sites).map(|_| rng.random::<bool>()).collect();
        Self { order, white }
    }

    fn apply(&self, img: &mut [f64], c: usize, proportion: f64) -> usize {
        let sites = self.order.len();
        let k = libm::round(proportion.clamp(0.0, 1.0) * sites as f64) as usize;
        for (n, &s) in self.order[..k].iter().enumerate() {
            let v = if self.white[n] { 1.0 } else { 0.0 };
            for ch in 0..c {
                img[ch * sites + s] = v;
            }
        }
        k
    }
}

/// One image's noise draw, reusable across intensities.
enum Draw {
    Field(Vec<f64>),
    Mask(SaltPepperMask),
}

impl Draw {
    fn new<R: Rng + ?Sized>(kind: NoiseKind, (c, h, w): (usize, usize, usize), rng: &mut R) -> Result<Self> {
        Ok(match kind {
            NoiseKind::White => Draw::Field((0..c * h * w).map(|_| StandardNormal.sample(rng)).collect()),
            NoiseKind::Pink => Draw::Field((0..c).flat_map(|_| pink_field(h, w, rng)).collect()),
            NoiseKind::SaltPepper => Draw::Mask(SaltPepperMask::draw(h * w, rng)),
            NoiseKind::WeightGaussian => return Err(Error::input("weight noise is not an image perturbation")),
        })
    }

    fn apply(&self, img: &mut [f64], c: usize, intensity: f64) {
        match self {
            Draw::Field(f) => {
                if intensity == 0.0 {
                    return;
                }
                for (v, e) in img.iter_mut().zip(f) {
                    *v += intensity * e;
                }
                clamp01(img);
            }
            Draw::Mask(m) => {
                m.apply(img, c, intensity);
            }
        }
    }
}

/// Applies `spec` to one raw image; `index` selects the image's stream.
pub fn perturb_image(img: &mut [f64], dims: (usize, usize, usize), spec: &NoiseSpec, repetition: u64, index: u64) -> Result<()> {
    spec.validate()?;
    let mut rng = stream(spec.seed, &[purpose::IMAGE_NOISE, spec.kind.code(), repetition, index]);
    Draw::new(spec.kind, dims, &mut rng)?.apply(img, dims.0, spec.intensity);
    Ok(())
}

/// Row of the image-noise robustness table.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRow {
    pub model_id: String,
    pub noise_kind: &'static str,
    pub intensity: f64,
    pub repetition: usize,
    pub accuracy: f64,
    pub normalized_accuracy: f64,
}

/// Accuracy of `model` on `raw` (unnormalized, `[0,1]` pixels) under each
/// intensity of `ladder`, normalized by clean accuracy. Emits an
/// intensity-0 row per repetition followed by one row per ladder level.
pub fn noise_accuracy_curve(
    model: &Model,
    raw: &Dataset,
    norm: &Normalization,
    kind: NoiseKind,
    ladder: &[f64],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<NoiseRow>> {
    if raw.normalization.is_some() {
        return Err(Error::input("noise is applied to raw images, got a normalized dataset"));
    }
    for &intensity in ladder {
        NoiseSpec { kind, intensity, seed }.validate()?;
    }
    let dims = raw.shape();
    let per = raw.image_len();
    let eval = |images: &[f64]| -> Result<f64> {
        Ok(model.evaluate(images, raw.len(), 256)?.accuracy(&raw.labels))
    };
    let mut clean = raw.images.clone();
    for img in clean.chunks_exact_mut(per) {
        norm.apply(img);
    }
    let clean_accuracy = eval(&clean)?;
    let normalized = |a: f64| if clean_accuracy > 0.0 { a / clean_accuracy } else { 0.0 };
    let mut rows = Vec::new();
    let mut buf = vec![0.0; raw.images.len()];
    for rep in 0..repetitions {
        rows.push(NoiseRow {
            model_id: model.spec.id(),
            noise_kind: kind.tag(),
            intensity: 0.0,
            repetition: rep,
            accuracy: clean_accuracy,
            normalized_accuracy: 1.0,
        });
        let draws = (0..raw.len())
            .map(|i| {
                let mut rng = stream(seed, &[purpose::IMAGE_NOISE, kind.code(), rep as u64, i as u64]);
                Draw::new(kind, dims, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        for &intensity in ladder {
            buf.copy_from_slice(&raw.images);
            for (img, d) in buf.chunks_exact_mut(per).zip(&draws) {
                d.apply(img, dims.0, intensity);
                norm.apply(img);
            }
            let accuracy = eval(&buf)?;
            rows.push(NoiseRow {
                model_id: model.spec.id(),
                noise_kind: kind.tag(),
                intensity,
                repetition: rep,
                accuracy,
                normalized_accuracy: normalized(accuracy),
            });
        }
    }
    Ok(rows)
}

/// Row of the weight-perturbation table.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNoiseRow {
    pub model_id: String,
    pub sigma_level: f64,
    pub repetition: usize,
    pub accuracy: f64,
    /// Clean minus perturbed accuracy, in percentage points.
    pub drop_abs: f64,
    /// Drop as a percentage of clean accuracy.
    pub drop_rel: f64,
    pub soi: f64,
}

/// Perturbs the `[10,121]` prototype matrix `repetitions` times at each
/// level and records accuracy on `images` (normalized) and the second-order
/// isomorphism between clean and perturbed RSMs.
pub fn weight_noise_analysis(
    model: &Model,
    images: &[f64],
    labels: &[u8],
    levels: &[f64],
    repetitions: usize,
    similarity: Similarity,
    seed: u64,
) -> Result<Vec<WeightNoiseRow>> {
    let count = labels.len();
    let post = model.fc1_activations(images, count, Stage::PostRelu)?;
    let w = model.fc2_weights();
    let bias = model.param("fc2.bias").expect("fc2.bias present").data().to_vec();
    let accuracy_with = |w: &Tensor| {
        let logits = Model::logits_from_fc1(post.data(), w, &bias);
        let hits = logits
            .chunks_exact(NUM_CLASSES)
            .zip(labels)
            .filter(|(row, &l)| crate::model::argmax(row) == l as usize)
            .count();
        hits as f64 / count.max(1) as f64
    };
    let clean_accuracy = accuracy_with(w);
    let clean_rsm = compute_rsm(w, similarity);
    let mut rows = Vec::with_capacity(levels.len() * repetitions);
    for (li, &level) in levels.iter().enumerate() {
        for rep in 0..repetitions {
            let noisy = perturb_weights(w, level, derive_seed(seed, &[li as u64, rep as u64]));
            let accuracy = accuracy_with(&noisy);
            let soi = second_order_isomorphism(&clean_rsm, &compute_rsm(&noisy, similarity))?;
            rows.push(WeightNoiseRow {
                model_id: model.spec.id(),
                sigma_level: level,
                repetition: rep,
                accuracy,
                drop_abs: 100.0 * (clean_accuracy - accuracy),
                drop_rel: if clean_accuracy > 0.0 {
                    100.0 * (clean_accuracy - accuracy) / clean_accuracy
                } else {
                    0.0
                },
                soi,
            });
        }
    }
    Ok(rows)
}
