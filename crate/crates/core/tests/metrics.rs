mod common;

use common::{random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use topo_core::grid::TopoGrid;
use topo_core::metrics::*;
use topo_core::tensor::Tensor;

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    (0..t.rows()).map(|r| t.row(r)[j]).collect()
}

#[test]
fn pearson_and_cosine_closed_forms() {
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    // r = 0.5 by construction: y = x + orthogonal component of equal norm·√3
    let x = [1.0, -1.0, 0.0, 0.0];
    let y = [1.0, -1.0, 3f64.sqrt(), -(3f64.sqrt())];
    assert!((pearson(&x, &y).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), None);
}

#[test]
fn rsm_examples() {
    let mut eye = vec![0.0; 100];
    for k in 0..10 {
        eye[k * 10 + k] = 1.0;
    }
    let rsm = compute_rsm(&Tensor::new(vec![10, 10], eye).unwrap(), Similarity::Cosine);
    for i in 0..10 {
        for j in 0..10 {
            assert_eq!(rsm.get(i, j), if i == j { 1.0 } else { 0.0 });
        }
    }
    assert_eq!(rsm.upper_triangle().len(), 45);

    let mut r = rng(1);
    let mut w = random_tensor(&mut r, &[10, 121]);
    let row3 = w.row(3).to_vec();
    w.data_mut()[7 * 121..8 * 121].copy_from_slice(&row3);
    for sim in [Similarity::Cosine, Similarity::Pearson] {
        let rsm = compute_rsm(&w, sim);
        assert!((rsm.get(3, 7) - 1.0).abs() < 1e-12);
        for i in 0..10 {
            for j in 0..10 {
                let (a, b) = (w.row(i), w.row(j));
                let want = match sim {
                    Similarity::Cosine => {
                        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                        dot / (na * nb)
                    }
                    Similarity::Pearson => pearson(a, b).unwrap(),
                };
                assert!((rsm.get(i, j) - want).abs() < 1e-12);
                assert_eq!(rsm.get(i, j), rsm.get(j, i));
            }
        }
    }

    let mut z = w.clone();
    z.data_mut()[..121].iter_mut().for_each(|v| *v = 0.0);
    let rsm = compute_rsm(&z, Similarity::Cosine);
    assert_eq!(rsm.degenerate_rows, vec![0]);
    assert_eq!(rsm.get(0, 5), 0.0);
}

#[test]
fn soi_examples() {
    let mut r = rng(2);
    let w = random_tensor(&mut r, &[10, 20]);
    let a = compute_rsm(&w, Similarity::Cosine);
    assert!((second_order_isomorphism(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let mut neg = a.clone();
    for i in 0..10 {
        for j in 0..10 {
            if i != j {
                neg.values[i * 10 + j] *= -1.0;
            }
        }
    }
    assert!((second_order_isomorphism(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
    let mut zero = a.clone();
    zero.values.iter_mut().for_each(|v| *v = 0.0);
    assert!(second_order_isomorphism(&a, &zero).is_err());
}

#[test]
fn entropy_examples() {
    let mut data = Vec::new();
    for s in 0..300 {
        data.push(2.5);
        data.push((s % 3) as f64);
        data.push(s as f64);
    }
    let t = Tensor::new(vec![300, 3], data).unwrap();
    let h = unit_entropy(&t, ENTROPY_BINS);
    assert_eq!(h[0], 0.0);
    assert!((h[1] - 3f64.ln()).abs() < 1e-12);
    assert!((h[2] - 30f64.ln()).abs() < 1e-12);
}

#[test]
fn poz_examples() {
    let t = Tensor::new(vec![4, 3], vec![1.0, 0.0, 0.0, 2.0, 0.0, 1.0, 0.5, 0.0, 0.0, 3.0, 0.0, 2.0]).unwrap();
    assert_eq!(poz(&t), vec![0.0, 1.0, 0.5]);
}

#[test]
fn weight_correlation_examples() {
    let grid = TopoGrid::standard();
    let mut r = rng(3);
    let base = random_tensor(&mut r, &[1, 64]);
    let mut data = Vec::new();
    for u in 0..121 {
        let (a, b) = (0.5 + u as f64 / 10.0, u as f64 - 60.0);
        data.extend(base.data().iter().map(|v| a * v + b));
    }
    let w = Tensor::new(vec![121, 64], data).unwrap();
    let f = neighbor_weight_correlation(&w, &grid).unwrap();
    assert!(f.neighbor_mean.iter().all(|r| (r - 1.0).abs() < 1e-12));
    assert_eq!(f.pairs.len(), 7260);

    // On a 2x2 grid unit 0's neighbors are 1, 2 and 3, all negated copies.
    let g2 = TopoGrid::new(2);
    let x: Vec<f64> = base.data()[..5].to_vec();
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let w2 = Tensor::new(vec![4, 5], [x.clone(), neg.clone(), neg.clone(), neg].concat()).unwrap();
    let f2 = neighbor_weight_correlation(&w2, &g2).unwrap();
    assert!((f2.neighbor_mean[0] + 1.0).abs() < 1e-12);

    let w = random_tensor(&mut r, &[121, 64]);
    let f = neighbor_weight_correlation(&w, &grid).unwrap();
    for (i, j) in grid.ordered_pairs() {
        assert!((f.get(i, j) - pearson(w.row(i), w.row(j)).unwrap()).abs() < 1e-12);
    }
    for i in 0..121 {
        let s = grid.moore(i);
        let want = s.iter().map(|&j| pearson(w.row(i), w.row(j)).unwrap()).sum::<f64>() / s.len() as f64;
        assert!((f.neighbor_mean[i] - want).abs() < 1e-12);
    }
}

#[test]
fn activation_correlation_examples() {
    let grid = TopoGrid::standard();
    let mut r = rng(4);
    let n = 10_000;
    let data: Vec<f64> = (0..n * 121).map(|_| StandardNormal.sample(&mut r)).collect();
    let mut acts = Tensor::new(vec![n, 121], data).unwrap();
    for s in 0..n {
        let v = acts.data()[s * 121 + 5];
        acts.data_mut()[s * 121 + 6] = v;
    }
    let f = activation_correlations(&acts, &grid).unwrap();
    assert!((f.get(5, 6) - 1.0).abs() < 1e-12);
    let independent: Vec<f64> = f
        .pairs
        .iter()
        .copied()
        .filter(|r| *r < 0.999)
        .map(f64::abs)
        .collect();
    assert!(mean(&independent) < 0.05);
    assert!((f.get(10, 20) - pearson(&column(&acts, 10), &column(&acts, 20)).unwrap()).abs() < 1e-12);
}

#[test]
fn degenerate_unit_is_flagged() {
    let grid = TopoGrid::new(2);
    let a = Tensor::new(vec![3, 4], vec![1.0, 2.0, 0.0, 5.0, 1.0, 3.0, 1.0, 5.0, 1.0, 1.0, 2.0, 5.0]).unwrap();
    let f = activation_correlations(&a, &grid).unwrap();
    assert_eq!(f.degenerate, vec![0, 3]);
    assert_eq!(f.get(0, 1), 0.0);
}

#[test]
fn colocalization_of_constructed_field() {
    // Four adjacent unit pairs strongly correlated, everything else independent.
    let grid = TopoGrid::standard();
    let mut r = rng(5);
    let n = 4000;
    let mut acts = Tensor::new(vec![n, 121], (0..n * 121).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap();
    for &(a, b) in &[(0, 1), (20, 31), (60, 61), (100, 111)] {
        for s in 0..n {
            let v = acts.data()[s * 121 + a];
            acts.data_mut()[s * 121 + b] = v;
        }
    }
    let f = activation_correlations(&acts, &grid).unwrap();
    let c = colocalization_distance(&f, &grid, 0.5);
    assert_eq!(c.pairs, 4);
    assert_eq!(c.mean_distance, Some(1.0));
    let none = colocalization_distance(&f, &grid, 1.1);
    assert_eq!((none.pairs, none.mean_distance), (0, None));

    let mut prev = usize::MAX;
    for alpha in COLOCALIZATION_ALPHAS {
        let k = colocalization_distance(&f, &grid, alpha).pairs;
        assert!(k <= prev);
        prev = k;
    }
}

#[test]
fn random_assignment_baseline_matches_mean_pairwise_distance() {
    let grid = TopoGrid::standard();
    let mut all = 0.0;
    for i in 0..121 {
        for j in i + 1..121 {
            all += grid.distance(i, j);
        }
    }
    let expected = all / 7260.0;
    assert!((5.4..5.8).contains(&expected), "{expected}");

    let mut r = rng(6);
    let acts = random_tensor(&mut r, &[40, 121]);
    let f = activation_correlations(&acts, &grid).unwrap();
    let base = colocalization_baseline(&f, &grid, 0.1, 1000, &mut rng(7));
    let got = base.mean_distance.unwrap();
    assert!((got - expected).abs() < 0.1, "{got} vs {expected}");
}

#[test]
fn morans_i_sign_cases() {
    let grid = TopoGrid::standard();
    let ramp: Vec<f64> = (0..121).map(|i| (i % 11) as f64).collect();
    assert!(morans_i(&ramp, &grid).unwrap() > 0.5);
    let checker: Vec<f64> = (0..121).map(|i| ((i / 11 + i % 11) % 2) as f64).collect();
    let ic = morans_i(&checker, &grid).unwrap();
    assert!(ic < 0.0 && ic >= -1.2);
    assert_eq!(morans_i(&[3.0; 121], &grid), None);

    let mut r = rng(8);
    let maps = random_tensor(&mut r, &[200, 121]);
    let s = mean_morans_i(&maps, &grid);
    assert_eq!(s.maps, 200);
    assert!((s.mean + 1.0 / 120.0).abs() < 0.03, "{}", s.mean);
}

#[test]
fn morans_i_brute_force() {
    let grid = TopoGrid::standard();
    let mut r = rng(9);
    let x: Vec<f64> = (0..121).map(|_| r.random_range(-1.0..1.0)).collect();
    let m = mean(&x);
    let (mut num, mut w) = (0.0, 0.0);
    for i in 0..121usize {
        for j in 0..121usize {
            let (ri, ci, rj, cj) = (i / 11, i % 11, j / 11, j % 11);
            if i != j && ri.abs_diff(rj) <= 1 && ci.abs_diff(cj) <= 1 {
                num += (x[i] - m) * (x[j] - m);
                w += 1.0;
            }
        }
    }
    let den: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    let want = 121.0 / w * num / den;
    assert!((morans_i(&x, &grid).unwrap() - want).abs() < 1e-12);
}

#[test]
fn effective_dimensionality_cases() {
    // Whitened k-dimensional features: every ±1 sign pattern once.
    let k = 4;
    let rows: Vec<f64> = (0..16)
        .flat_map(|s| (0..k).map(move |j| if (s >> j) & 1 == 1 { 1.0 } else { -1.0 }))
        .collect();
    let full = Tensor::new(vec![16, k], rows).unwrap();
    assert!((effective_dimensionality(&full).unwrap() - k as f64).abs() < 1e-9);

    let u: Vec<f64> = (0..10).map(|i| i as f64 - 3.0).collect();
    let v = [1.0, -2.0, 0.5];
    let rank1: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
    let ed = effective_dimensionality(&Tensor::new(vec![10, 3], rank1).unwrap()).unwrap();
    assert!((ed - 1.0).abs() < 1e-9);

    assert!(effective_dimensionality(&Tensor::zeros(&[5, 3])).is_err());
}

#[test]
fn effective_dimensionality_matches_svd() {
    let mut r = rng(10);
    let m = random_tensor(&mut r, &[50, 20]);
    let (n, d) = (50, 20);
    let mut c = m.data().to_vec();
    for j in 0..d {
        let mu: f64 = (0..n).map(|s| c[s * d + j]).sum::<f64>() / n as f64;
        for s in 0..n {
            c[s * d + j] -= mu;
        }
    }
    let svd = nalgebra::DMatrix::from_row_slice(n, d, &c).svd(false, false);
    let lam: Vec<f64> = svd.singular_values.iter().map(|s| s * s / (n - 1) as f64).collect();
    let want = lam.iter().sum::<f64>().powi(2) / lam.iter().map(|l| l * l).sum::<f64>();
    let got = effective_dimensionality(&m).unwrap();
    assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    assert!(got >= 1.0 && got <= 20.0);

    // trace(C)² / ‖C‖_F² gives the same number without any decomposition.
    let cm = nalgebra::DMatrix::from_row_slice(n, d, &c);
    let cov = cm.transpose() * &cm / (n - 1) as f64;
    let frob: f64 = cov.iter().map(|v| v * v).sum();
    assert!((got - cov.trace().powi(2) / frob).abs() < 1e-8);
}

#[test]
fn calibration_examples() {
    let mut logits = vec![0.0; 30];
    let labels = [2u8, 5, 9];
    for (i, &l) in labels.iter().enumerate() {
        logits[i * 10 + l as usize] = 200.0;
    }
    let c = calibration(&logits, &labels, CALIBRATION_BINS);
    assert!(c.ece < 1e-12);
    assert_eq!(c.accuracy, 1.0);
    assert_eq!(c.logit_gap, 200.0);

    let mut row = vec![0.0; 10];
    row[0] = 4.5;
    let c = calibration(&row, &[0], CALIBRATION_BINS);
    assert!((c.logit_gap - 4.5).abs() < 1e-15);
    let p = 4.5f64.exp() / (4.5f64.exp() + 9.0);
    assert!((c.mean_confidence - p).abs() < 1e-12);
    assert!((c.ece - (1.0 - p)).abs() < 1e-12);

    // Binary top1-vs-top2 probability at a gap of 4: σ(4) ≈ 0.982.
    let sigma = 1.0 / (1.0 + (-4.0f64).exp());
    assert!((sigma - 0.982).abs() < 1e-3);
}

#[test]
fn ece_brute_force() {
    let mut r = rng(11);
    let logits = random_tensor(&mut r, &[200, 10]);
    let labels: Vec<u8> = (0..200).map(|_| r.random_range(0..10)).collect();
    let mut bins = vec![(0.0, 0.0, 0usize); 15];
    for (row, &l) in logits.data().chunks(10).zip(&labels) {
        let (top, &mx) = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap();
        let p = 1.0 / row.iter().map(|v| (v - mx).exp()).sum::<f64>();
        let b = ((p * 15.0) as usize).min(14);
        bins[b].0 += p;
        bins[b].1 += (top == l as usize) as u8 as f64;
        bins[b].2 += 1;
    }
    let want: f64 = bins
        .iter()
        .filter(|b| b.2 > 0)
        .map(|b| b.2 as f64 / 200.0 * ((b.1 - b.0) / b.2 as f64).abs())
        .sum();
    let got = calibration(logits.data(), &labels, 15).ece;
    assert!((got - want).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pearson_affine_invariance(
        x in prop::collection::vec(-5.0f64..5.0, 12),
        y in prop::collection::vec(-5.0f64..5.0, 12),
        a in prop_oneof![-4.0f64..-0.1, 0.1f64..4.0],
        b in -3.0f64..3.0,
    ) {
        if let Some(r) = pearson(&x, &y) {
            let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let r2 = pearson(&ax, &y).unwrap();
            prop_assert!((r2 - a.signum() * r).abs() < 1e-9);
        }
    }

    #[test]
    fn morans_i_in_range(x in prop::collection::vec(-5.0f64..5.0, 121)) {
        if let Some(i) = morans_i(&x, &TopoGrid::standard()) {
            prop_assert!((-1.2..=1.2).contains(&i));
        }
    }

    #[test]
    fn ed_bounded_by_rank(data in prop::collection::vec(-2.0f64..2.0, 6 * 4)) {
        let m = Tensor::new(vec![6, 4], data).unwrap();
        if let Ok(ed) = effective_dimensionality(&m) {
            prop_assert!(ed >= 1.0 - 1e-9 && ed <= 4.0 + 1e-9);
        }
    }

    #[test]
    fn activation_correlation_affine_invariance(
        data in prop::collection::vec(-2.0f64..2.0, 10 * 9),
        a in prop_oneof![-4.0f64..-0.1, 0.1f64..4.0],
        b in -3.0f64..3.0,
    ) {
        let grid = TopoGrid::new(3);
        let t = Tensor::new(vec![10, 9], data).unwrap();
        let mut u = t.clone();
        for s in 0..10 {
            let v = &mut u.data_mut()[s * 9];
            *v = a * *v + b;
        }
        let f = activation_correlations(&t, &grid).unwrap();
        let g = activation_correlations(&u, &grid).unwrap();
        for j in 1..9 {
            prop_assert!((g.get(0, j) - a.signum() * f.get(0, j)).abs() < 1e-9);
        }
    }
}
