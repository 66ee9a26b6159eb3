mod common;

use common::{gradcheck, random_tensor, rel_err, rng};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use topo_core::model::{build_cifar_net, build_mnist_net, Model};
use topo_core::tensor::{BatchNormState, Mode, Tape, Tensor, Var};
use topo_core::Error;

const TOL: f64 = 1e-4;

fn sum_sq(tape: &mut Tape, v: Var) -> Var {
    let s = tape.square(v);
    tape.sum(s)
}

#[test]
fn conv2d_zero_input_gives_bias_planes() {
    let mut r = rng(1);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 3, 5, 4]), false);
    let k = tape.leaf(random_tensor(&mut r, &[2, 3, 3, 3]), false);
    let b = tape.leaf(Tensor::new(vec![2], vec![0.7, -1.5]).unwrap(), false);
    let y = tape.conv2d(x, k, b).unwrap();
    assert_eq!(tape.shape(y), &[2, 2, 5, 4]);
    for (i, plane) in tape.value(y).data().chunks(20).enumerate() {
        let want = if i % 2 == 0 { 0.7 } else { -1.5 };
        assert!(plane.iter().all(|v| *v == want));
    }
}

#[test]
fn conv2d_is_cross_correlation() {
    // Center output of a 3x3 input equals the elementwise product sum with
    // the unflipped kernel.
    let input: Vec<f64> = (1..=9).map(f64::from).collect();
    let kernel: Vec<f64> = vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0, -2.0, 0.25, 1.5];
    let want: f64 = input.iter().zip(&kernel).map(|(a, b)| a * b).sum();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1, 3, 3], input).unwrap(), false);
    let k = tape.leaf(Tensor::new(vec![1, 1, 3, 3], kernel.clone()).unwrap(), false);
    let b = tape.leaf(Tensor::zeros(&[1]), false);
    let y = tape.conv2d(x, k, b).unwrap();
    assert!((tape.value(y).data()[4] - want).abs() < 1e-12);

    // Impulse at the center: the output is the kernel rotated by 180°.
    let mut impulse = vec![0.0; 9];
    impulse[4] = 1.0;
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1, 3, 3], impulse).unwrap(), false);
    let k = tape.leaf(Tensor::new(vec![1, 1, 3, 3], kernel.clone()).unwrap(), false);
    let b = tape.leaf(Tensor::zeros(&[1]), false);
    let y = tape.conv2d(x, k, b).unwrap();
    let got = tape.value(y).data();
    for i in 0..9 {
        assert_eq!(got[i], kernel[8 - i]);
    }
}

#[test]
fn conv2d_channel_mismatch_is_shape_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
    let k = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
    let b = tape.leaf(Tensor::zeros(&[1]), false);
    assert!(matches!(tape.conv2d(x, k, b), Err(Error::Shape { .. })));
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut r = rng(2);
    let inputs = [
        random_tensor(&mut r, &[2, 3, 5, 6]),
        random_tensor(&mut r, &[4, 3, 3, 3]),
        random_tensor(&mut r, &[4]),
    ];
    let plain = gradcheck(&inputs, &|t, v| {
        let y = t.conv2d(v[0], v[1], v[2]).unwrap();
        t.sum(y)
    });
    assert!(plain < TOL, "sum(conv) rel err {plain}");
    let squared = gradcheck(&inputs, &|t, v| {
        let y = t.conv2d(v[0], v[1], v[2]).unwrap();
        sum_sq(t, y)
    });
    assert!(squared < TOL, "sum(conv²) rel err {squared}");
}

#[test]
fn elementary_op_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0]), false);
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

    let c = tape.leaf(Tensor::filled(&[2, 3, 4, 4], 1.75), false);
    let p = tape.global_avg_pool(c).unwrap();
    assert_eq!(tape.shape(p), &[2, 3]);
    assert!(tape.value(p).data().iter().all(|v| (*v - 1.75).abs() < 1e-15));

    let mut r = rng(3);
    let d = tape.leaf(random_tensor(&mut r, &[3, 7]), false);
    let same = tape.dropout(d, 0.0, Mode::Train, &mut r).unwrap();
    assert_eq!(tape.value(same), tape.value(d));
    let eval = tape.dropout(d, 0.5, Mode::Eval, &mut r).unwrap();
    assert_eq!(tape.value(eval), tape.value(d));
    assert!(tape.dropout(d, 1.0, Mode::Train, &mut r).is_err());
    assert_eq!(tape.op_tag(eval), "dropout");
}

#[test]
fn dropout_scales_survivors() {
    let mut tape = Tape::new();
    let mut r = rng(4);
    let x = tape.leaf(Tensor::filled(&[1000], 1.0), false);
    let y = tape.dropout(x, 0.3, Mode::Train, &mut r).unwrap();
    let vals = tape.value(y).data();
    assert!(vals.iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.7).abs() < 1e-12));
    let kept = vals.iter().filter(|v| **v > 0.0).count();
    assert!((600..800).contains(&kept), "{kept}");
}

#[test]
fn max_pool_rejects_zero_extent_and_breaks_ties_first() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(&[1, 1, 2, 2], 3.0), true);
    assert!(matches!(tape.max_pool(x, 0), Err(Error::Shape { .. })));
    let y = tape.max_pool2x2(x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn pooling_linear_and_activation_gradients() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[2, 3, 6, 5]);
    let err = gradcheck(&[x.clone()], &|t, v| {
        let y = t.max_pool2x2(v[0]).unwrap();
        sum_sq(t, y)
    });
    assert!(err < TOL, "maxpool {err}");
    let err = gradcheck(&[x.clone()], &|t, v| {
        let y = t.global_avg_pool(v[0]).unwrap();
        sum_sq(t, y)
    });
    assert!(err < TOL, "gap {err}");
    let err = gradcheck(&[x], &|t, v| {
        let y = t.relu(v[0]);
        sum_sq(t, y)
    });
    assert!(err < TOL, "relu {err}");

    let lin = [
        random_tensor(&mut r, &[4, 6]),
        random_tensor(&mut r, &[5, 6]),
        random_tensor(&mut r, &[5]),
    ];
    let err = gradcheck(&lin, &|t, v| {
        let y = t.linear(v[0], v[1], v[2]).unwrap();
        sum_sq(t, y)
    });
    assert!(err < TOL, "linear {err}");
}

#[test]
fn batchnorm_gradients_in_both_modes() {
    let mut r = rng(6);
    let inputs = [
        random_tensor(&mut r, &[3, 2, 4, 4]),
        random_tensor(&mut r, &[2]),
        random_tensor(&mut r, &[2]),
    ];
    let weights = random_tensor(&mut r, &[3, 2, 4, 4]);
    for mode in [Mode::Train, Mode::Eval] {
        let w = weights.clone();
        let err = gradcheck(&inputs, &move |t, v| {
            let mut state = BatchNormState::new(2);
            state.running_mean = vec![0.2, -0.1];
            state.running_var = vec![0.8, 1.3];
            let y = t.batch_norm2d(v[0], v[1], v[2], &mut state, mode).unwrap();
            let wv = t.leaf(w.clone(), false);
            let z = t.mul(y, wv).unwrap();
            sum_sq(t, z)
        });
        assert!(err < TOL, "{mode:?} {err}");
    }
}

#[test]
fn batchnorm_updates_running_stats_only_in_training() {
    let mut tape = Tape::new();
    let mut state = BatchNormState::new(1);
    let x = tape.leaf(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let g = tape.leaf(Tensor::filled(&[1], 1.0), false);
    let b = tape.leaf(Tensor::zeros(&[1]), false);
    tape.batch_norm2d(x, g, b, &mut state, Mode::Eval).unwrap();
    assert_eq!(state, BatchNormState::new(1));
    tape.batch_norm2d(x, g, b, &mut state, Mode::Train).unwrap();
    assert!((state.running_mean[0] - 0.25).abs() < 1e-12);
    // unbiased variance of 1..4 is 5/3
    assert!((state.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn dropout_gradient_uses_the_same_mask() {
    let mut r = rng(7);
    let x = random_tensor(&mut r, &[4, 9]);
    let err = gradcheck(&[x], &|t, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let y = t.dropout(v[0], 0.4, Mode::Train, &mut mask_rng).unwrap();
        sum_sq(t, y)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn softmax_cross_entropy_values_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3, 10]), false);
    let l = tape.softmax_cross_entropy(x, &[0, 4, 9]).unwrap();
    assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);
    assert!(matches!(tape.softmax_cross_entropy(x, &[0, 4, 10]), Err(Error::Input(_))));

    let mut row = vec![0.0; 10];
    row[3] = 60.0;
    let big = tape.leaf(Tensor::new(vec![1, 10], row).unwrap(), false);
    let l = tape.softmax_cross_entropy(big, &[3]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-20);

    let mut r = rng(8);
    let logits = random_tensor(&mut r, &[4, 10]);
    let err = gradcheck(&[logits], &|t, v| t.softmax_cross_entropy(v[0], &[1, 7, 7, 0]).unwrap());
    assert!(err < TOL, "{err}");
}

#[test]
fn backward_basic_examples_and_accumulation() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    tape.zero_grad();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);

    let sq = tape.square(x);
    let l = tape.sum(sq);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);

    assert!(matches!(tape.backward(sq), Err(Error::Usage(_))));
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(9);
    let ab = [random_tensor(&mut r, &[3, 4]), random_tensor(&mut r, &[3, 4])];
    let err = gradcheck(&ab, &|t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[1]).unwrap();
        let m = t.mul(d, v[1]).unwrap();
        let k = t.scale(m, -2.5);
        t.mean(k)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng(10);
    let x0 = random_tensor(&mut r, &[2, 5]);
    let (a, b) = (1.7, -0.6);
    let grad_of = |build: &dyn Fn(&mut Tape, Var) -> Var| {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let l = build(&mut tape, x);
        tape.backward(l).unwrap();
        tape.grad(x).unwrap().to_vec()
    };
    let f = |t: &mut Tape, x: Var| sum_sq(t, x);
    let g = |t: &mut Tape, x: Var| {
        let y = t.relu(x);
        t.mean(y)
    };
    let gf = grad_of(&f);
    let gg = grad_of(&g);
    let combo = grad_of(&|t, x| {
        let fv = f(t, x);
        let gv = g(t, x);
        let fa = t.scale(fv, a);
        let gb = t.scale(gv, b);
        t.add(fa, gb).unwrap()
    });
    for i in 0..gf.len() {
        assert!((combo[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
    }
}

fn net_gradcheck(model: &Model, images: Tensor, labels: &[usize], samples: usize, seed: u64) -> f64 {
    let loss_at = |m: &Model| {
        let mut m = m.clone();
        let mut tape = Tape::new();
        let mut drop = ChaCha8Rng::seed_from_u64(seed);
        let f = m.forward(&mut tape, images.clone(), Mode::Train, &mut drop, false).unwrap();
        let l = tape.softmax_cross_entropy(f.logits, labels).unwrap();
        tape.value(l).data()[0]
    };
    let mut m = model.clone();
    let mut tape = Tape::new();
    let mut drop = ChaCha8Rng::seed_from_u64(seed);
    let f = m.forward(&mut tape, images.clone(), Mode::Train, &mut drop, true).unwrap();
    let l = tape.softmax_cross_entropy(f.logits, labels).unwrap();
    tape.backward(l).unwrap();

    let mut pick = rng(seed + 1);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        use rand::Rng;
        let p = pick.random_range(0..model.params.len());
        let i = pick.random_range(0..model.params[p].value.len());
        let analytic = tape.grad(f.params[p]).unwrap()[i];
        let mut up = model.clone();
        up.params[p].value.data_mut()[i] += common::FD_STEP;
        let mut down = model.clone();
        down.params[p].value.data_mut()[i] -= common::FD_STEP;
        let numeric = (loss_at(&up) - loss_at(&down)) / (2.0 * common::FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

#[test]
fn mnist_net_gradients_match_finite_differences() {
    let model = build_mnist_net(11);
    let mut r = rng(12);
    let images = random_tensor(&mut r, &[2, 1, 28, 28]);
    let err = net_gradcheck(&model, images, &[3, 8], 20, 13);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn cifar_net_gradients_match_finite_differences() {
    let model = build_cifar_net(14);
    let mut r = rng(15);
    let images = random_tensor(&mut r, &[2, 3, 32, 32]);
    let err = net_gradcheck(&model, images, &[0, 5], 10, 16);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut m = build_mnist_net(21);
        let mut r = rng(22);
        let images = random_tensor(&mut r, &[3, 1, 28, 28]);
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, images, Mode::Train, &mut r, true).unwrap();
        let l = tape.softmax_cross_entropy(f.logits, &[1, 2, 3]).unwrap();
        tape.backward(l).unwrap();
        let mut out = tape.value(f.logits).data().to_vec();
        for p in &f.params {
            out.extend_from_slice(tape.grad(*p).unwrap());
        }
        out
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
