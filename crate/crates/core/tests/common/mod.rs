#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topo_core::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of a scalar function of several tensors,
/// taken with respect to input `which`.
pub fn numeric_grad(inputs: &[Tensor], which: usize, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<f64> {
    let mut work = inputs.to_vec();
    let n = work[which].len();
    let mut g = vec![0.0; n];
    for i in 0..n {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + FD_STEP;
        let up = f(&work);
        work[which].data_mut()[i] = orig - FD_STEP;
        let down = f(&work);
        work[which].data_mut()[i] = orig;
        g[i] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// Builds the graph with `build` on leaves for `inputs`, runs autodiff, and
/// compares every input gradient with finite differences. Returns the worst
/// relative error.
pub fn gradcheck(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        let numeric = numeric_grad(inputs, k, &eval);
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}
