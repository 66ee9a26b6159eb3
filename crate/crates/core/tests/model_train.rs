mod common;

use common::{random_tensor, rng};
use rand::Rng;
use topo_core::checkpoint::ModelCheckpoint;
use topo_core::data::{Dataset, Split};
use topo_core::grid::GRID_UNITS;
use topo_core::model::{build_cifar_net, build_mnist_net, Arch, Model, ModelSpec, Stage};
use topo_core::spatial::Constraint;
use topo_core::tensor::{Mode, Tape, Tensor};
use topo_core::train::{train, TrainConfig};
use topo_core::Error;

fn spec(constraint: Constraint, lambda: f64, seed: u64) -> ModelSpec {
    ModelSpec {
        arch: Arch::Mnist,
        constraint,
        lambda,
        seed,
    }
}

/// Images whose class is encoded by which horizontal band is bright, plus
/// a little noise.
fn banded(count: usize, seed: u64, split: Split) -> Dataset {
    let mut r = rng(seed);
    let mut images = Vec::with_capacity(count * 784);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = (i % 4) as u8;
        for y in 0..28 {
            for _ in 0..28 {
                let on = y / 7 == label as usize;
                images.push(if on { 1.0 } else { 0.0 } + r.random_range(-0.1..0.1));
            }
        }
        labels.push(label);
    }
    Dataset::new(images, labels, (1, 28, 28), split).unwrap()
}

#[test]
fn forward_shapes() {
    let mut r = rng(1);
    let mut m = build_mnist_net(1);
    let mut tape = Tape::new();
    let f = m
        .forward(&mut tape, random_tensor(&mut r, &[8, 1, 28, 28]), Mode::Train, &mut r, false)
        .unwrap();
    assert_eq!(tape.shape(f.logits), &[8, 10]);
    assert_eq!(tape.shape(f.fc1_pre), &[8, GRID_UNITS]);
    assert_eq!(m.fc1_weights().shape(), &[121, 64]);
    assert_eq!(m.fc2_weights().shape(), &[10, 121]);

    let mut c = build_cifar_net(1);
    let mut tape = Tape::new();
    let f = c
        .forward(&mut tape, random_tensor(&mut r, &[4, 3, 32, 32]), Mode::Train, &mut r, false)
        .unwrap();
    assert_eq!(tape.shape(f.logits), &[4, 10]);
    assert_eq!(c.fc1_weights().shape(), &[121, 256]);

    let mut tape = Tape::new();
    let wrong = m.forward(&mut tape, Tensor::zeros(&[1, 3, 28, 28]), Mode::Eval, &mut r, false);
    assert!(matches!(wrong, Err(Error::Shape { .. })));
}

#[test]
fn same_seed_same_parameters() {
    assert_eq!(build_mnist_net(5), build_mnist_net(5));
    assert_ne!(build_mnist_net(5).params, build_mnist_net(6).params);
    assert_eq!(build_cifar_net(5), build_cifar_net(5));
}

#[test]
fn parameter_count_is_independent_of_constraint() {
    for arch in [Arch::Mnist, Arch::Cifar] {
        let counts: Vec<usize> = [
            (Constraint::None, 0.0),
            (Constraint::Ws, 1.0),
            (Constraint::As, 1.0),
            (Constraint::AsGlobal, 1.0),
        ]
        .iter()
        .map(|&(c, l)| Model::new(ModelSpec { arch, constraint: c, lambda: l, seed: 3 }).parameter_count())
        .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    }
}

#[test]
fn eval_mode_is_deterministic_and_stage_consistent() {
    let mut r = rng(2);
    let c = build_cifar_net(2);
    let x = random_tensor(&mut r, &[3, 3, 32, 32]);
    let a = c.evaluate(x.data(), 3, 2).unwrap();
    let b = c.evaluate(x.data(), 3, 3).unwrap();
    assert_eq!(a, b);

    let m = build_mnist_net(2);
    let x = random_tensor(&mut r, &[5, 1, 28, 28]);
    let pre = m.fc1_activations(x.data(), 5, Stage::PreRelu).unwrap();
    let post = m.fc1_activations(x.data(), 5, Stage::PostRelu).unwrap();
    assert!(post.data().iter().all(|v| *v >= 0.0));
    for (p, q) in pre.data().iter().zip(post.data()) {
        assert_eq!(p.max(0.0), *q);
    }
}

/// Same-padded 3x3 cross-correlation by explicit loops.
fn naive_conv(x: &[f64], cin: usize, h: usize, w: usize, k: &[f64], b: &[f64]) -> Vec<f64> {
    let cout = b.len();
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut s = b[o];
                for c in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as i64 + ky as i64 - 1, xx as i64 + kx as i64 - 1);
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            s += k[((o * cin + c) * 3 + ky) * 3 + kx] * x[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = s;
            }
        }
    }
    out
}

fn naive_pool(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x[(ch * h + 2 * y + dy) * w + 2 * xx + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

#[test]
fn zero_image_follows_the_bias_pathway() {
    let mut r = rng(3);
    let mut m = build_mnist_net(3);
    for name in ["conv1.bias", "conv2.bias", "fc1.bias"] {
        for v in m.param_mut(name).unwrap().data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
    let p = |n: &str| m.param(n).unwrap().data().to_vec();
    let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();

    let a1 = relu(naive_conv(&vec![0.0; 784], 1, 28, 28, &p("conv1.weight"), &p("conv1.bias")));
    let p1 = naive_pool(&a1, 32, 28, 28);
    let a2 = relu(naive_conv(&p1, 32, 14, 14, &p("conv2.weight"), &p("conv2.bias")));
    let p2 = naive_pool(&a2, 64, 14, 14);
    let gap: Vec<f64> = p2.chunks(49).map(|c| c.iter().sum::<f64>() / 49.0).collect();
    let (w1, b1) = (p("fc1.weight"), p("fc1.bias"));
    let want: Vec<f64> = (0..121)
        .map(|u| b1[u] + (0..64).map(|k| w1[u * 64 + k] * gap[k]).sum::<f64>())
        .collect();

    let got = m.fc1_activations(&vec![0.0; 784], 1, Stage::PreRelu).unwrap();
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut r = rng(4);
    let mut m = build_cifar_net(4);
    // Populate running statistics with a training-mode pass.
    let mut tape = Tape::new();
    m.forward(&mut tape, random_tensor(&mut r, &[2, 3, 32, 32]), Mode::Train, &mut r, false)
        .unwrap();
    let ck = ModelCheckpoint::from_model(&m, 7, 128, 0.5, 0.25);
    let bytes = ck.encode();
    let back = ModelCheckpoint::decode(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_model().unwrap(), m);

    let mut extra = bytes.clone();
    extra.push(0);
    assert!(ModelCheckpoint::decode(&extra).is_err());
    assert!(ModelCheckpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(ModelCheckpoint::decode(&bad).is_err());

    let mut wrong = ck.clone();
    wrong.spec.arch = Arch::Mnist;
    assert!(wrong.to_model().is_err());
}

fn quick(spec: ModelSpec) -> TrainConfig {
    let mut c = TrainConfig::new(spec);
    c.epochs = 2;
    c.batch_size = 8;
    c.log_every = 1;
    c
}

#[test]
fn zero_lambda_ws_run_matches_control() {
    let train_set = banded(24, 5, Split::Train);
    let test_set = banded(8, 6, Split::Test);
    let control = train(&quick(spec(Constraint::None, 0.0, 9)), &train_set, &test_set).unwrap();
    let ws0 = train(&quick(spec(Constraint::Ws, 0.0, 9)), &train_set, &test_set).unwrap();
    assert_eq!(control.model.params, ws0.model.params);
    assert!(ws0.log.epochs.iter().all(|e| e.train_spatial > 0.0));
}

#[test]
fn training_is_deterministic_and_logs_contiguously() {
    let train_set = banded(24, 7, Split::Train);
    let test_set = banded(8, 8, Split::Test);
    let cfg = quick(spec(Constraint::As, 1.0, 2));
    let a = train(&cfg, &train_set, &test_set).unwrap();
    let b = train(&cfg, &train_set, &test_set).unwrap();
    assert_eq!(a.checkpoint.encode(), b.checkpoint.encode());
    let epochs: Vec<usize> = a.log.epochs.iter().map(|e| e.epoch).collect();
    assert_eq!(epochs, vec![1, 2]);
    assert_eq!(a.log.rows().len(), 4);
    for rec in &a.log.batches {
        let l = rec.loss;
        assert!((l.joint - (l.ce + l.lambda * l.spatial)).abs() < 1e-12);
    }
}

#[test]
fn joint_loss_trends_down() {
    let train_set = banded(48, 9, Split::Train);
    let test_set = banded(16, 10, Split::Test);
    for (c, l) in [(Constraint::None, 0.0), (Constraint::Ws, 3.0), (Constraint::AsGlobal, 3.0)] {
        let mut cfg = quick(spec(c, l, 3));
        cfg.epochs = 3;
        let out = train(&cfg, &train_set, &test_set).unwrap();
        let first = out.log.epochs.first().unwrap().train_joint;
        let last = out.log.epochs.last().unwrap().train_joint;
        assert!(last < first, "{c:?}: {first} -> {last}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = banded(4, 1, Split::Train);
    let mut cfg = quick(spec(Constraint::Ws, 0.7, 1));
    assert!(train(&cfg, &ds, &ds).is_err());
    cfg.spec.lambda = 1.0;
    cfg.batch_size = 1;
    assert!(train(&cfg, &ds, &ds).is_err());
    let cifar = ModelSpec::control(Arch::Cifar, 1);
    assert!(train(&quick(cifar), &ds, &ds).is_err());
}
