//! Wedge and ring stimuli and the angular / eccentricity tuning analyses.
//!
//! Geometry: pixel `(row, col)` sits at `dx = col - c`, `dy = c - row` with
//! `c = (size - 1) / 2`, so angles are measured counter-clockwise from the
//! positive x axis. Wedge `k` covers polar angles in
//! `[kΔ - extent/2, kΔ + extent/2)` out to `radius`; ring `k` covers
//! `outer_k - thickness < ρ ≤ outer_k`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{Matrix4, Vector4};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::fourier::{dft, Spectrum};
use crate::grid::TopoGrid;
use crate::metrics::{mean, pearson, MetricRow};
use crate::model::{Model, Stage};

pub const CYCLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StimulusGeometry {
    pub wedges: usize,
    /// Angular extent of each wedge in degrees.
    pub wedge_extent: f64,
    pub wedge_radius: f64,
    pub rings: usize,
    pub ring_min: f64,
    pub ring_max: f64,
    pub ring_thickness: f64,
}

impl Default for StimulusGeometry {
    fn default() -> Self {
        Self {
            wedges: 36,
            wedge_extent: 10.0,
            wedge_radius: 14.0,
            rings: 13,
            ring_min: 1.0,
            ring_max: 14.0,
            ring_thickness: 1.5,
        }
    }
}

impl StimulusGeometry {
    pub fn ring_radii(&self) -> Vec<f64> {
        let n = self.rings;
        if n == 1 {
            return vec![self.ring_max];
        }
        (0..n)
            .map(|k| self.ring_min + (self.ring_max - self.ring_min) * k as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Binary single-channel stimuli, `size × size`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusSet {
    pub size: usize,
    pub images: Vec<Vec<f64>>,
}

fn polar(size: usize, row: usize, col: usize) -> (f64, f64) {
    let c = (size as f64 - 1.0) / 2.0;
    let (dx, dy) = (col as f64 - c, c - row as f64);
    let rho = libm::sqrt(dx * dx + dy * dy);
    let mut deg = libm::atan2(dy, dx) * 180.0 / PI;
    if deg < 0.0 {
        deg += 360.0;
    }
    // Snap so that rays through pixel centers land on the same side of a
    // wedge boundary after a 180° rotation.
    deg = libm::round(deg * 1e6) / 1e6;
    (rho, deg % 360.0)
}

pub fn gen_wedges(size: usize, g: &StimulusGeometry) -> StimulusSet {
    let step = 360.0 / g.wedges as f64;
    let half = g.wedge_extent / 2.0;
    let images = (0..g.wedges)
        .map(|k| {
            let centre = k as f64 * step;
            let mut img = vec![0.0; size * size];
            for r in 0..size {
                for c in 0..size {
                    let (rho, deg) = polar(size, r, c);
                    let mut diff = (deg - centre) % 360.0;
                    if diff >= 180.0 {
                        diff -= 360.0;
                    } else if diff < -180.0 {
                        diff += 360.0;
                    }
                    if rho <= g.wedge_radius && diff >= -half && diff < half {
                        img[r * size + c] = 1.0;
                    }
                }
            }
            img
        })
        .collect();
    StimulusSet { size, images }
}

pub fn gen_rings(size: usize, g: &StimulusGeometry) -> StimulusSet {
    let images = g
        .ring_radii()
        .into_iter()
        .map(|outer| {
            let mut img = vec![0.0; size * size];
            for r in 0..size {
                for c in 0..size {
                    let (rho, _) = polar(size, r, c);
                    if rho > outer - g.ring_thickness && rho <= outer {
                        img[r * size + c] = 1.0;
                    }
                }
            }
            img
        })
        .collect();
    StimulusSet { size, images }
}

/// Power of a real sequence at cycles 1–5 plus the DC term.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicProfile {
    /// `power[c - 1]` for cycle `c`; one-sided, so that DC plus all
    /// harmonics sums to the mean square of the sequence.
    pub power: [f64; CYCLES],
    pub dc: f64,
    /// `None` for a (numerically) constant profile.
    pub dominant: Option<usize>,
    /// Argument of the dominant Fourier coefficient, radians.
    pub phase: f64,
    /// Two or more cycles share the maximal power.
    pub tie: bool,
}

/// Full one-sided power spectrum: `[DC, cycle 1, …, cycle N/2]`.
pub fn power_spectrum(x: &[f64]) -> (Vec<f64>, Spectrum) {
    let n = x.len();
    let f = dft(&Spectrum::from_real(x), false);
    let n2 = (n * n) as f64;
    let p = (0..=n / 2)
        .map(|k| {
            let twice = k != 0 && !(n % 2 == 0 && k == n / 2);
            f.norm_sqr(k) / n2 * if twice { 2.0 } else { 1.0 }
        })
        .collect();
    (p, f)
}

pub fn harmonic_spectrum(responses: &[f64]) -> HarmonicProfile {
    assert!(responses.len() > 2 * CYCLES, "harmonic_spectrum: profile too short");
    let (p, f) = power_spectrum(responses);
    let mut power = [0.0; CYCLES];
    power.copy_from_slice(&p[1..=CYCLES]);
    let ac: f64 = p[1..].iter().sum();
    let ms = responses.iter().map(|v| v * v).sum::<f64>() / responses.len() as f64;
    let best = power.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(best > 1e-12 * ms.max(1e-300)) || ac <= 0.0 {
        return HarmonicProfile {
            power,
            dc: p[0],
            dominant: None,
            phase: 0.0,
            tie: false,
        };
    }
    let near: Vec<usize> = (0..CYCLES).filter(|&c| best - power[c] <= 1e-9).collect();
    let c = near[0] + 1;
    HarmonicProfile {
        power,
        dc: p[0],
        dominant: Some(c),
        phase: f.arg(c),
        tie: near.len() > 1,
    }
}

/// Per-unit fraction of Moore neighbors with the same dominant cycle
/// (constant units form their own class); returns `(mean, sd)` over units.
pub fn neighborhood_agreement(dominant: &[Option<usize>], grid: &TopoGrid) -> (f64, f64) {
    let per_unit: Vec<f64> = (0..grid.unit_count())
        .map(|i| {
            let s = grid.moore(i);
            s.iter().filter(|&&j| dominant[j] == dominant[i]).count() as f64 / s.len().max(1) as f64
        })
        .collect();
    let m = mean(&per_unit);
    let var = per_unit.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / per_unit.len() as f64;
    (m, libm::sqrt(var))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseClass {
    Horizontal,
    Vertical,
    Diagonal,
    Cardinal,
    Other,
}

impl PhaseClass {
    pub fn tag(self) -> &'static str {
        match self {
            PhaseClass::Horizontal => "horizontal",
            PhaseClass::Vertical => "vertical",
            PhaseClass::Diagonal => "diagonal",
            PhaseClass::Cardinal => "cardinal",
            PhaseClass::Other => "other",
        }
    }
}

pub const PHASE_TOLERANCE_DEG: f64 = 15.0;

/// Polar angle (degrees, in `[0, 360/cycle)`) at which the dominant
/// component `cos(cθ + φ)` peaks.
pub fn peak_angle(profile: &HarmonicProfile, cycle: usize) -> f64 {
    let period = 360.0 / cycle as f64;
    let a = (-profile.phase * 180.0 / PI / cycle as f64) % period;
    if a < 0.0 {
        a + period
    } else {
        a
    }
}

fn angular_gap(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).abs() % period;
    d.min(period - d)
}

/// Orientation class of a unit whose dominant cycle is `cycle` (2 or 4).
pub fn classify_phase(profile: &HarmonicProfile, cycle: usize) -> Result<PhaseClass> {
    if cycle != 2 && cycle != 4 {
        return Err(Error::Usage(alloc::format!("phase classes exist for cycles 2 and 4, not {cycle}")));
    }
    if profile.dominant != Some(cycle) {
        return Err(Error::Usage(alloc::format!(
            "unit's dominant cycle is {:?}, not {cycle}",
            profile.dominant
        )));
    }
    let period = 360.0 / cycle as f64;
    let peak = peak_angle(profile, cycle);
    let near = |target: f64| angular_gap(peak, target, period) <= PHASE_TOLERANCE_DEG;
    Ok(match cycle {
        2 if near(0.0) => PhaseClass::Horizontal,
        2 if near(90.0) => PhaseClass::Vertical,
        2 if near(45.0) || near(135.0) => PhaseClass::Diagonal,
        4 if near(0.0) => PhaseClass::Cardinal,
        4 if near(45.0) => PhaseClass::Diagonal,
        _ => PhaseClass::Other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EccentricityClass {
    Increasing,
    Decreasing,
    Bandpass,
    Flat,
}

impl EccentricityClass {
    pub fn tag(self) -> &'static str {
        match self {
            EccentricityClass::Increasing => "increasing",
            EccentricityClass::Decreasing => "decreasing",
            EccentricityClass::Bandpass => "bandpass",
            EccentricityClass::Flat => "flat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
    pub baseline: f64,
    pub r_squared: f64,
    pub converged: bool,
}

impl GaussianFit {
    pub fn eval(&self, x: f64) -> f64 {
        gaussian(&Vector4::new(self.amplitude, self.center, self.width, self.baseline), x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EccentricityProfile {
    pub class: EccentricityClass,
    /// Pearson correlation with ring index (0 when undefined).
    pub r: f64,
    pub fit: Option<GaussianFit>,
    /// The fit was attempted but did not converge.
    pub fit_failed: bool,
}

pub const LINEAR_THRESHOLD: f64 = 0.8;
pub const BANDPASS_R2: f64 = 0.5;

fn gaussian(p: &Vector4<f64>, x: f64) -> f64 {
    let z = (x - p[1]) / p[2];
    p[0] * libm::exp(-0.5 * z * z) + p[3]
}

struct Bounds {
    lo: Vector4<f64>,
    hi: Vector4<f64>,
}

impl Bounds {
    fn clamp(&self, p: &mut Vector4<f64>) {
        for k in 0..4 {
            p[k] = p[k].clamp(self.lo[k], self.hi[k]);
        }
    }
}

fn sse(p: &Vector4<f64>, xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter().zip(ys).map(|(&x, &y)| {
            let e = gaussian(p, x) - y;
            e * e
        }).sum()
}

/// Bounded Levenberg–Marquardt on `a·exp(-(x-μ)²/(2σ²)) + b`.
fn levenberg_marquardt(start: Vector4<f64>, xs: &[f64], ys: &[f64], bounds: &Bounds) -> (Vector4<f64>, f64, bool) {
    let mut p = start;
    bounds.clamp(&mut p);
    let mut cost = sse(&p, xs, ys);
    let mut damping = 1e-3;
    for _ in 0..500 {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for (&x, &y) in xs.iter().zip(ys) {
            let z = (x - p[1]) / p[2];
            let e = libm::exp(-0.5 * z * z);
            let j = Vector4::new(e, p[0] * e * z / p[2], p[0] * e * z * z / p[2], 1.0);
            let r = gaussian(&p, x) - y;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        while damping < 1e12 {
            let mut a = jtj;
            for k in 0..4 {
                a[(k, k)] += damping * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-jtr)) else {
                damping *= 10.0;
                continue;
            };
            let mut q = p + step;
            bounds.clamp(&mut q);
            let c = sse(&q, xs, ys);
            if c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                p = q;
                cost = c;
                damping = (damping / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-12 || cost < 1e-24 {
                    return (p, cost, true);
                }
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            // No descent direction left at any damping: a (constrained)
            // stationary point.
            return (p, cost, true);
        }
    }
    (p, cost, false)
}

/// Best multi-start Gaussian fit of `ys` sampled at `xs`.
pub fn fit_gaussian(xs: &[f64], ys: &[f64]) -> Option<GaussianFit> {
    let ymean = mean(ys);
    let sst: f64 = ys.iter().map(|y| (y - ymean) * (y - ymean)).sum();
    if sst <= 0.0 {
        return None;
    }
    let amax = ys.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(1e-12);
    let (ymin, ymax) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &y| (l.min(y), h.max(y)));
    let bounds = Bounds {
        lo: Vector4::new(-10.0 * amax, 0.0, 0.3, f64::NEG_INFINITY),
        hi: Vector4::new(10.0 * amax, 14.0, 14.0, f64::INFINITY),
    };
    let mut best: Option<(Vector4<f64>, f64, bool)> = None;
    for mu in [3.0, 6.0, 9.0, 12.0] {
        let start = Vector4::new(ymax - ymin, mu, 2.0, ymin);
        let cand = levenberg_marquardt(start, xs, ys, &bounds);
        if best.as_ref().is_none_or(|b| cand.1 < b.1) {
            best = Some(cand);
        }
    }
    let (p, cost, converged) = best?;
    Some(GaussianFit {
        amplitude: p[0],
        center: p[1],
        width: p[2],
        baseline: p[3],
        r_squared: 1.0 - cost / sst,
        converged,
    })
}

/// Classifies a ring-response profile; `responses[k]` is the response to
/// ring `k + 1`.
pub fn fit_eccentricity(responses: &[f64]) -> EccentricityProfile {
    let xs: Vec<f64> = (1..=responses.len()).map(|k| k as f64).collect();
    let r = pearson(&xs, responses).unwrap_or(0.0);
    if r > LINEAR_THRESHOLD {
        return EccentricityProfile {
            class: EccentricityClass::Increasing,
            r,
            fit: None,
            fit_failed: false,
        };
    }
    if r < -LINEAR_THRESHOLD {
        return EccentricityProfile {
            class: EccentricityClass::Decreasing,
            r,
            fit: None,
            fit_failed: false,
        };
    }
    let fit = fit_gaussian(&xs, responses);
    let fit_failed = fit.is_some_and(|f| !f.converged);
    let class = match fit {
        Some(f) if f.converged && f.r_squared > BANDPASS_R2 => EccentricityClass::Bandpass,
        _ => EccentricityClass::Flat,
    };
    EccentricityProfile {
        class,
        r,
        fit,
        fit_failed,
    }
}

/// Presents a stimulus set to `model` (replicated across channels and
/// normalized) and returns pre-ReLU fc1 responses, `[stimulus][unit]`.
pub fn stimulus_responses(model: &Model, set: &StimulusSet, norm: &Normalization) -> Result<Vec<Vec<f64>>> {
    let (c, h, w) = model.spec.arch.input_shape();
    if h != set.size || w != set.size {
        return Err(Error::input(alloc::format!("stimuli are {0}x{0}, model expects {h}x{w}", set.size)));
    }
    let mut images = Vec::with_capacity(set.images.len() * c * h * w);
    for img in &set.images {
        let mut full: Vec<f64> = (0..c).flat_map(|_| img.iter().copied()).collect();
        norm.apply(&mut full);
        images.extend(full);
    }
    let acts = model.fc1_activations(&images, set.images.len(), Stage::PreRelu)?;
    Ok((0..acts.rows()).map(|s| acts.row(s).to_vec()).collect())
}

/// Angular and eccentricity tuning of every topographic unit.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningReport {
    pub harmonics: Vec<HarmonicProfile>,
    pub agreement_mean: f64,
    pub agreement_sd: f64,
    /// Phase class of each unit whose dominant cycle is 2 or 4.
    pub phase: Vec<Option<PhaseClass>>,
    pub eccentricity: Vec<EccentricityProfile>,
}

impl TuningReport {
    pub fn dominant(&self) -> Vec<Option<usize>> {
        self.harmonics.iter().map(|h| h.dominant).collect()
    }

    /// Fraction of units whose dominant cycle is `cycle`.
    pub fn cycle_proportion(&self, cycle: usize) -> f64 {
        let n = self.harmonics.len().max(1) as f64;
        self.harmonics.iter().filter(|h| h.dominant == Some(cycle)).count() as f64 / n
    }

    pub fn rows(&self, spec: &crate::model::ModelSpec) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        let n = self.harmonics.len().max(1) as f64;
        for c in 1..=CYCLES {
            rows.push(MetricRow::new(spec, "dominant_cycle_proportion", c, "", Some(self.cycle_proportion(c))));
        }
        let flat = self.harmonics.iter().filter(|h| h.dominant.is_none()).count() as f64 / n;
        rows.push(MetricRow::new(spec, "dominant_cycle_proportion", "none", "", Some(flat)));
        let ties = self.harmonics.iter().filter(|h| h.tie).count() as f64;
        rows.push(MetricRow::new(spec, "dominant_cycle_ties", "", "", Some(ties)));
        rows.push(MetricRow::new(spec, "harmonic_agreement", "mean", "", Some(self.agreement_mean)));
        rows.push(MetricRow::new(spec, "harmonic_agreement", "sd", "", Some(self.agreement_sd)));
        for (cycle, classes) in [
            (2, &[PhaseClass::Horizontal, PhaseClass::Vertical, PhaseClass::Diagonal, PhaseClass::Other][..]),
            (4, &[PhaseClass::Cardinal, PhaseClass::Diagonal, PhaseClass::Other][..]),
        ] {
            let members: Vec<PhaseClass> = self
                .harmonics
                .iter()
                .zip(&self.phase)
                .filter(|(h, _)| h.dominant == Some(cycle))
                .filter_map(|(_, p)| *p)
                .collect();
            for class in classes {
                let k = members.iter().filter(|p| *p == class).count();
                let v = (!members.is_empty()).then(|| k as f64 / members.len() as f64);
                rows.push(MetricRow::new(spec, "phase_class_proportion", cycle, class.tag(), v));
            }
        }
        let ne = self.eccentricity.len().max(1) as f64;
        for class in [
            EccentricityClass::Increasing,
            EccentricityClass::Decreasing,
            EccentricityClass::Bandpass,
            EccentricityClass::Flat,
        ] {
            let k = self.eccentricity.iter().filter(|e| e.class == class).count() as f64;
            rows.push(MetricRow::new(spec, "eccentricity_class_proportion", class.tag(), "", Some(k / ne)));
        }
        let failed = self.eccentricity.iter().filter(|e| e.fit_failed).count() as f64;
        rows.push(MetricRow::new(spec, "eccentricity_fit_failures", "", "", Some(failed)));
        for b in 0..14 {
            let k = self
                .eccentricity
                .iter()
                .filter(|e| e.class == EccentricityClass::Bandpass)
                .filter_map(|e| e.fit)
                .filter(|f| f.center >= b as f64 && (f.center < (b + 1) as f64 || (b == 13 && f.center <= 14.0)))
                .count();
            rows.push(MetricRow::new(spec, "bandpass_center_count", b, b + 1, Some(k as f64)));
        }
        for (u, h) in self.harmonics.iter().enumerate() {
            let d = h.dominant.map(|d| d as f64);
            rows.push(MetricRow::new(spec, "unit_dominant_cycle", u, "", d));
        }
        rows
    }
}

pub fn tuning_report(model: &Model, norm: &Normalization, geometry: &StimulusGeometry) -> Result<TuningReport> {
    let size = model.spec.arch.input_shape().1;
    let grid = TopoGrid::standard();
    let wedge = stimulus_responses(model, &gen_wedges(size, geometry), norm)?;
    let ring = stimulus_responses(model, &gen_rings(size, geometry), norm)?;
    let units = grid.unit_count();
    let column = |rows: &[Vec<f64>], u: usize| -> Vec<f64> { rows.iter().map(|r| r[u]).collect() };
    let harmonics: Vec<HarmonicProfile> = (0..units).map(|u| harmonic_spectrum(&column(&wedge, u))).collect();
    let dominant: Vec<Option<usize>> = harmonics.iter().map(|h| h.dominant).collect();
    let (agreement_mean, agreement_sd) = neighborhood_agreement(&dominant, &grid);
    let phase = harmonics
        .iter()
        .map(|h| match h.dominant {
            Some(c @ (2 | 4)) => classify_phase(h, c).ok(),
            _ => None,
        })
        .collect();
    let eccentricity = (0..units).map(|u| fit_eccentricity(&column(&ring, u))).collect();
    Ok(TuningReport {
        harmonics,
        agreement_mean,
        agreement_sd,
        phase,
        eccentricity,
    })
}

/// Writes a binary stimulus as an 8-bit PGM (P5) image.
pub fn to_pgm(img: &[f64], size: usize) -> Vec<u8> {
    let mut out: Vec<u8> = alloc::format!("P5\n{size} {size}\n255\n").into_bytes();
    out.extend(img.iter().map(|v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8));
    out
}

/// Short description of a stimulus set, e.g. for logs.
pub fn describe(set: &StimulusSet) -> String {
    let on: Vec<usize> = set
        .images
        .iter()
        .map(|i| i.iter().filter(|v| **v > 0.0).count())
        .collect();
    alloc::format!("{} stimuli of {}x{}, lit pixels {:?}", set.images.len(), set.size, set.size, on)
}
