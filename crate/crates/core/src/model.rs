//! The two classification networks and their topographic `fc1` layer.
//!
//! MNIST: `conv(1→32)+ReLU+pool → conv(32→64)+ReLU+pool → GAP(64) →
//! fc1(64→121)+ReLU+dropout(0.5) → fc2(121→10)`.
//!
//! CIFAR-10: four `conv+BN+ReLU` blocks with 32/64/128/256 filters (pooling
//! after the first three) `→ GAP(256) → fc1(256→121)+ReLU+dropout(0.3) →
//! fc2(121→10)`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::GRID_UNITS;
use crate::spatial::Constraint;
use crate::tensor::{BatchNormState, Mode, Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arch {
    Mnist,
    Cifar,
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::Mnist => "mnist",
            Arch::Cifar => "cifar",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Some(Arch::Mnist),
            "cifar" | "cifar10" | "cifar-10" => Some(Arch::Cifar),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Arch::Mnist => 1,
            Arch::Cifar => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Arch::Mnist),
            2 => Some(Arch::Cifar),
            _ => None,
        }
    }

    /// `(channels, height, width)` of the input images.
    pub fn input_shape(self) -> (usize, usize, usize) {
        match self {
            Arch::Mnist => (1, 28, 28),
            Arch::Cifar => (3, 32, 32),
        }
    }

    /// Width of the feature vector entering fc1.
    pub fn fc1_fan_in(self) -> usize {
        match self {
            Arch::Mnist => 64,
            Arch::Cifar => 256,
        }
    }

    pub fn dropout(self) -> f64 {
        match self {
            Arch::Mnist => 0.5,
            Arch::Cifar => 0.3,
        }
    }

    fn conv_channels(self) -> &'static [usize] {
        match self {
            Arch::Mnist => &[1, 32, 64],
            Arch::Cifar => &[3, 32, 64, 128, 256],
        }
    }

    fn batch_norm(self) -> bool {
        self == Arch::Cifar
    }

    /// Whether conv block `i` (0-based) is followed by 2×2 max pooling.
    fn pools_after(self, i: usize) -> bool {
        match self {
            Arch::Mnist => true,
            Arch::Cifar => i < 3,
        }
    }
}

/// Weighting levels used for constrained runs.
pub const LAMBDA_LEVELS: [f64; 6] = [0.1, 0.3, 0.5, 1.0, 2.0, 3.0];

/// Identity of one trained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub constraint: Constraint,
    pub lambda: f64,
    pub seed: u64,
}

impl ModelSpec {
    pub fn control(arch: Arch, seed: u64) -> Self {
        Self {
            arch,
            constraint: Constraint::None,
            lambda: 0.0,
            seed,
        }
    }

    /// Stable identifier, e.g. `mnist-ws-l0.3-s4`.
    pub fn id(&self) -> String {
        alloc::format!(
            "{}-{}-l{}-s{}",
            self.arch.tag(),
            self.constraint.tag(),
            self.lambda,
            self.seed
        )
    }

    /// Checks that λ is one of the weighting levels for constrained runs
    /// (or zero for control runs).
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::input(alloc::format!("lambda must be finite and nonnegative, got {}", self.lambda)));
        }
        match self.constraint {
            Constraint::None if self.lambda != 0.0 => {
                Err(Error::input("control models are trained with lambda = 0"))
            }
            Constraint::None => Ok(()),
            _ if self.lambda == 0.0 || LAMBDA_LEVELS.contains(&self.lambda) => Ok(()),
            _ => Err(Error::input(alloc::format!(
                "lambda {} is not one of {:?}",
                self.lambda, LAMBDA_LEVELS
            ))),
        }
    }
}

/// Named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Activations of the topographic layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    PreRelu,
    PostRelu,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub fc1_pre: Var,
    pub fc1_post: Var,
    /// One leaf per entry of [`Model::params`], in the same order.
    pub params: Vec<Var>,
}

/// Evaluation-mode outputs for a set of images, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub count: usize,
    pub logits: Vec<f64>,
    pub fc1_pre: Vec<f64>,
}

impl EvalOutput {
    pub fn fc1_post(&self) -> Vec<f64> {
        self.fc1_pre.iter().map(|v| v.max(0.0)).collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.logits.chunks_exact(NUM_CLASSES).map(argmax).collect()
    }

    pub fn accuracy(&self, labels: &[u8]) -> f64 {
        let hits = self
            .predictions()
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == **l as usize)
            .count();
        hits as f64 / self.count.max(1) as f64
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// A network instance: parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Param>,
    pub bn: Vec<BatchNormState>,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

impl Model {
    /// Freshly initialized network: He-uniform weights, zero biases, unit
    /// batch-norm scale. Deterministic in `spec.seed`.
    pub fn new(spec: ModelSpec) -> Self {
        let arch = spec.arch;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::new();
        let mut bn = Vec::new();
        let chans = arch.conv_channels();
        for (i, pair) in chans.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            params.push(Param {
                name: alloc::format!("conv{}.weight", i + 1),
                value: he_uniform(&mut rng, &[cout, cin, 3, 3], cin * 9),
            });
            params.push(Param {
                name: alloc::format!("conv{}.bias", i + 1),
                value: Tensor::zeros(&[cout]),
            });
            if arch.batch_norm() {
                params.push(Param {
                    name: alloc::format!("bn{}.weight", i + 1),
                    value: Tensor::filled(&[cout], 1.0),
                });
                params.push(Param {
                    name: alloc::format!("bn{}.bias", i + 1),
                    value: Tensor::zeros(&[cout]),
                });
                bn.push(BatchNormState::new(cout));
            }
        }
        let d = arch.fc1_fan_in();
        params.push(Param {
            name: "fc1.weight".to_string(),
            value: he_uniform(&mut rng, &[GRID_UNITS, d], d),
        });
        params.push(Param {
            name: "fc1.bias".to_string(),
            value: Tensor::zeros(&[GRID_UNITS]),
        });
        params.push(Param {
            name: "fc2.weight".to_string(),
            value: he_uniform(&mut rng, &[NUM_CLASSES, GRID_UNITS], GRID_UNITS),
        });
        params.push(Param {
            name: "fc2.bias".to_string(),
            value: Tensor::zeros(&[NUM_CLASSES]),
        });
        Self { spec, params, bn }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// `[121, fan_in]` afferent weights of the topographic layer.
    pub fn fc1_weights(&self) -> &Tensor {
        self.param("fc1.weight").expect("fc1.weight present")
    }

    /// `[10, 121]` class-prototype matrix.
    pub fn fc2_weights(&self) -> &Tensor {
        self.param("fc2.weight").expect("fc2.weight present")
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records a forward pass on `tape`. Parameters become leaves that
    /// require gradients iff `track_grad`. Batch-norm running statistics are
    /// updated in training mode.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        images: Tensor,
        mode: Mode,
        rng: &mut R,
        track_grad: bool,
    ) -> Result<Forward> {
        let arch = self.spec.arch;
        let (c, h, w) = arch.input_shape();
        let s = images.shape();
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(Error::shape(
                "forward",
                alloc::format!("{} expects [N,{c},{h},{w}], got {:?}", arch.tag(), s),
            ));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), track_grad))
            .collect();
        let mut x = tape.leaf(images, false);
        let mut pi = 0;
        let blocks = arch.conv_channels().len() - 1;
        for i in 0..blocks {
            x = tape.conv2d(x, params[pi], params[pi + 1])?;
            pi += 2;
            if arch.batch_norm() {
                x = tape.batch_norm2d(x, params[pi], params[pi + 1], &mut self.bn[i], mode)?;
                pi += 2;
            }
            x = tape.relu(x);
            if arch.pools_after(i) {
                x = tape.max_pool2x2(x)?;
            }
        }
        let feat = tape.global_avg_pool(x)?;
        let fc1_pre = tape.linear(feat, params[pi], params[pi + 1])?;
        let fc1_post = tape.relu(fc1_pre);
        let dropped = tape.dropout(fc1_post, arch.dropout(), mode, rng)?;
        let logits = tape.linear(dropped, params[pi + 2], params[pi + 3])?;
        Ok(Forward {
            logits,
            fc1_pre,
            fc1_post,
            params,
        })
    }

    /// Evaluation-mode forward over `count` images stored contiguously in
    /// `images`, processed `chunk` at a time. Running statistics are not
    /// modified.
    pub fn evaluate(&self, images: &[f64], count: usize, chunk: usize) -> Result<EvalOutput> {
        let (c, h, w) = self.spec.arch.input_shape();
        let per = c * h * w;
        if images.len() != count * per {
            return Err(Error::shape(
                "evaluate",
                alloc::format!("{} values for {count} images of {per}", images.len()),
            ));
        }
        let chunk = chunk.max(1);
        let mut scratch = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut logits = Vec::with_capacity(count * NUM_CLASSES);
        let mut fc1_pre = Vec::with_capacity(count * GRID_UNITS);
        let mut start = 0;
        while start < count {
            let n = chunk.min(count - start);
            let batch = Tensor::new(vec![n, c, h, w], images[start * per..(start + n) * per].to_vec())?;
            let mut tape = Tape::new();
            let f = scratch.forward(&mut tape, batch, Mode::Eval, &mut rng, false)?;
            logits.extend_from_slice(tape.value(f.logits).data());
            fc1_pre.extend_from_slice(tape.value(f.fc1_pre).data());
            start += n;
        }
        Ok(EvalOutput {
            count,
            logits,
            fc1_pre,
        })
    }

    /// `[N, 121]` topographic-layer activations at the requested stage.
    pub fn fc1_activations(&self, images: &[f64], count: usize, stage: Stage) -> Result<Tensor> {
        let out = self.evaluate(images, count, 256)?;
        let data = match stage {
            Stage::PreRelu => out.fc1_pre,
            Stage::PostRelu => out.fc1_post(),
        };
        Tensor::new(vec![count, GRID_UNITS], data)
    }

    /// Logits from cached post-ReLU fc1 activations (`[N,121]`) with a
    /// replacement `[10,121]` prototype matrix; used by weight-noise analyses.
    pub fn logits_from_fc1(fc1_post: &[f64], fc2_weights: &Tensor, fc2_bias: &[f64]) -> Vec<f64> {
        let n = fc1_post.len() / GRID_UNITS;
        let mut out = vec![0.0; n * NUM_CLASSES];
        for row in out.chunks_exact_mut(NUM_CLASSES) {
            row.copy_from_slice(fc2_bias);
        }
        crate::tensor::gemm(
            n,
            GRID_UNITS,
            NUM_CLASSES,
            1.0,
            fc1_post,
            crate::tensor::Transpose::No,
            fc2_weights.data(),
            crate::tensor::Transpose::Yes,
            1.0,
            &mut out,
        );
        out
    }
}

pub fn build_mnist_net(seed: u64) -> Model {
    Model::new(ModelSpec::control(Arch::Mnist, seed))
}

pub fn build_cifar_net(seed: u64) -> Model {
    Model::new(ModelSpec::control(Arch::Cifar, seed))
}
