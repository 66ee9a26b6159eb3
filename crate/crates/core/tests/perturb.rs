mod common;

use common::{random_tensor, rng};
use topo_core::data::{Dataset, Normalization, Split};
use topo_core::fourier::{dft2, frequency, Spectrum};
use topo_core::metrics::{mean, Similarity};
use topo_core::model::build_mnist_net;
use topo_core::perturb::*;

fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

#[test]
fn weight_noise_zero_sigma_is_identity_and_seeded() {
    let mut r = rng(1);
    let w = random_tensor(&mut r, &[10, 121]);
    assert_eq!(perturb_weights(&w, 0.0, 5), w);
    assert_eq!(perturb_weights(&w, 1.0, 5), perturb_weights(&w, 1.0, 5));
    assert_ne!(perturb_weights(&w, 1.0, 5), perturb_weights(&w, 1.0, 6));
}

#[test]
fn weight_noise_moments() {
    let mut r = rng(2);
    let w = random_tensor(&mut r, &[10, 121]);
    let target = 0.5 * entry_sd(&w);
    let mut diffs = Vec::new();
    for rep in 0..100 {
        let p = perturb_weights(&w, 0.5, 1000 + rep);
        diffs.extend(p.data().iter().zip(w.data()).map(|(a, b)| a - b));
    }
    assert!(mean(&diffs).abs() < 0.05 * target);
    assert!((sd(&diffs) / target - 1.0).abs() < 0.05);
}

#[test]
fn white_noise_properties() {
    let mut img = vec![0.5; 784];
    add_white_noise(&mut img, 0.0, &mut rng(3));
    assert!(img.iter().all(|v| *v == 0.5));

    // Small intensity keeps nearly everything inside [0,1], so the added sd
    // is visible before clamping bites.
    let mut all = Vec::new();
    for k in 0..20 {
        let mut im = vec![0.5; 784];
        add_white_noise(&mut im, 0.1, &mut rng(100 + k));
        all.extend(im);
    }
    assert!((sd(&all) / 0.1 - 1.0).abs() < 0.05);
    assert!(all.iter().all(|v| (0.0..=1.0).contains(v)));

    let mut a = vec![0.2; 784];
    let mut b = vec![0.2; 784];
    add_white_noise(&mut a, 0.7, &mut rng(9));
    add_white_noise(&mut b, 0.7, &mut rng(9));
    assert_eq!(a, b);
}

#[test]
fn pink_field_statistics() {
    let (h, w) = (28, 28);
    let mut power = vec![0.0; h * w];
    for k in 0..50 {
        let f = pink_field(h, w, &mut rng(200 + k));
        assert!(mean(&f).abs() < 0.05);
        assert!((sd(&f) - 1.0).abs() < 1e-9);
        let s = dft2(&Spectrum::from_real(&f), h, w, false);
        for i in 0..h * w {
            power[i] += s.norm_sqr(i) / 50.0;
        }
    }
    // Radially averaged periodogram in integer-radius shells.
    let mut shell = vec![(0.0, 0usize); 15];
    for r in 0..h {
        for c in 0..w {
            let f = (frequency(r, h).powi(2) + frequency(c, w).powi(2)).sqrt() * h as f64;
            let b = f.round() as usize;
            if b >= 1 && b < 15 {
                shell[b].0 += power[r * w + c];
                shell[b].1 += 1;
            }
        }
    }
    let mut slopes_x = Vec::new();
    let mut slopes_y = Vec::new();
    for (b, (p, n)) in shell.iter().enumerate().skip(1) {
        slopes_x.push((b as f64).ln());
        slopes_y.push((p / *n as f64).ln());
    }
    let mx = mean(&slopes_x);
    let my = mean(&slopes_y);
    let cov: f64 = slopes_x.iter().zip(&slopes_y).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = slopes_x.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = cov / var;
    assert!((slope + 2.0).abs() < 0.3, "slope {slope}");
}

#[test]
fn pink_noise_identity_at_zero() {
    let mut img = vec![0.3; 784];
    add_pink_noise(&mut img, (1, 28, 28), 0.0, &mut rng(5));
    assert!(img.iter().all(|v| *v == 0.3));
    add_pink_noise(&mut img, (1, 28, 28), 0.5, &mut rng(5));
    assert!(img.iter().any(|v| *v != 0.3));
    assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn salt_pepper_exact_counts() {
    let mut img = vec![0.5; 3 * 32 * 32];
    assert_eq!(add_salt_pepper(&mut img, (3, 32, 32), 0.0, &mut rng(6)), 0);
    assert!(img.iter().all(|v| *v == 0.5));
    for p in [0.05, 0.1, 0.2, 0.3, 0.4] {
        let mut img = vec![0.5; 3 * 32 * 32];
        let k = add_salt_pepper(&mut img, (3, 32, 32), p, &mut rng(7));
        assert_eq!(k, (p * 1024.0f64).round() as usize);
        for ch in 0..3 {
            let flipped = img[ch * 1024..(ch + 1) * 1024].iter().filter(|v| **v != 0.5).count();
            assert_eq!(flipped, k);
        }
        // the site mask is shared by the channels
        for s in 0..1024 {
            assert!(img[s] == img[1024 + s] && img[s] == img[2048 + s]);
        }
    }
    let mut img = vec![0.5; 784];
    add_salt_pepper(&mut img, (1, 28, 28), 1.0, &mut rng(8));
    assert!(img.iter().all(|v| *v == 0.0 || *v == 1.0));
    let white = img.iter().filter(|v| **v == 1.0).count();
    assert!((300..484).contains(&white));
}

#[test]
fn noise_spec_validation() {
    let bad = NoiseSpec {
        kind: NoiseKind::SaltPepper,
        intensity: 1.5,
        seed: 0,
    };
    assert!(bad.validate().is_err());
    let neg = NoiseSpec {
        kind: NoiseKind::White,
        intensity: -0.1,
        seed: 0,
    };
    assert!(neg.validate().is_err());
    assert_eq!(NoiseKind::parse("salt_pepper"), Some(NoiseKind::SaltPepper));
}

#[test]
fn image_noise_is_per_image() {
    let spec = NoiseSpec {
        kind: NoiseKind::Pink,
        intensity: 0.4,
        seed: 11,
    };
    let mut a = vec![0.5; 784];
    let mut b = vec![0.5; 784];
    perturb_image(&mut a, (1, 28, 28), &spec, 0, 3).unwrap();
    perturb_image(&mut b, (1, 28, 28), &spec, 0, 3).unwrap();
    assert_eq!(a, b);
    let mut c = vec![0.5; 784];
    perturb_image(&mut c, (1, 28, 28), &spec, 0, 4).unwrap();
    assert_ne!(a, c);
}

fn raw_set(n: usize) -> Dataset {
    let mut r = rng(12);
    let img = random_tensor(&mut r, &[n, 1, 28, 28]);
    let pixels = img.data().iter().map(|v| (v + 1.0) / 2.0).collect();
    let labels = (0..n).map(|i| (i % 10) as u8).collect();
    Dataset::new(pixels, labels, (1, 28, 28), Split::Test).unwrap()
}

#[test]
fn noise_curve_rows_and_batching_independence() {
    let model = build_mnist_net(1);
    let raw = raw_set(12);
    let norm = Normalization::new(vec![0.5], vec![0.3]).unwrap();
    let rows = noise_accuracy_curve(&model, &raw, &norm, NoiseKind::SaltPepper, &SALT_PEPPER_LADDER, 2, 3).unwrap();
    assert_eq!(rows.len(), 2 * 6);
    assert_eq!(rows[0].intensity, 0.0);
    assert_eq!(rows[0].normalized_accuracy, 1.0);

    // Recompute one level image by image.
    let level = &rows[3];
    let mut hits = 0;
    for i in 0..raw.len() {
        let mut img = raw.image(i).to_vec();
        let spec = NoiseSpec {
            kind: NoiseKind::SaltPepper,
            intensity: level.intensity,
            seed: 3,
        };
        perturb_image(&mut img, (1, 28, 28), &spec, level.repetition as u64, i as u64).unwrap();
        norm.apply(&mut img);
        let out = model.evaluate(&img, 1, 1).unwrap();
        hits += (out.predictions()[0] == raw.labels[i] as usize) as usize;
    }
    assert_eq!(level.accuracy, hits as f64 / raw.len() as f64);

    let normalized = topo_core::data::normalize(&raw, &norm).unwrap();
    assert!(noise_accuracy_curve(&model, &normalized, &norm, NoiseKind::White, &WHITE_LADDER, 1, 0).is_err());
    assert!(noise_accuracy_curve(&model, &raw, &norm, NoiseKind::WeightGaussian, &WEIGHT_LADDER, 1, 0).is_err());
}

#[test]
fn weight_noise_analysis_zero_sigma_restores_baseline() {
    let model = build_mnist_net(2);
    let raw = raw_set(20);
    let rows = weight_noise_analysis(&model, &raw.images, &raw.labels, &[0.0, 1.0], 3, Similarity::Cosine, 9).unwrap();
    assert_eq!(rows.len(), 6);
    for r in &rows[..3] {
        assert_eq!(r.soi, 1.0);
        assert_eq!(r.drop_abs, 0.0);
    }
    assert!(rows[3..].iter().all(|r| r.soi < 1.0));
    let clean = model.evaluate(&raw.images, 20, 8).unwrap().accuracy(&raw.labels);
    assert_eq!(rows[0].accuracy, clean);
}
