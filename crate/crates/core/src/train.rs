//! Adam training of the joint objective.

use alloc::vec::Vec;

use crate::checkpoint::ModelCheckpoint;
use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::grid::TopoGrid;
use crate::model::{Arch, Model, ModelSpec, NUM_CLASSES};
use crate::optim::Adam;
use crate::rng::{purpose, stream};
use crate::spatial::{joint_loss, spatial_loss, Constraint, LossBreakdown};
use crate::tensor::{Mode, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub spec: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Record a [`LossBreakdown`] every this many batches (0 disables).
    pub log_every: usize,
}

impl TrainConfig {
    /// η = 0.001, batch 128, Adam (0.9, 0.999, 1e-8); 15 epochs for MNIST and
    /// 30 for CIFAR-10.
    pub fn new(spec: ModelSpec) -> Self {
        Self {
            spec,
            epochs: match spec.arch {
                Arch::Mnist => 15,
                Arch::Cifar => 30,
            },
            batch_size: 128,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            log_every: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::input("epochs and batch size must be positive"));
        }
        if self.spec.constraint != Constraint::None && self.batch_size < 2 {
            return Err(Error::input("spatial training needs batches of at least 2"));
        }
        Ok(())
    }
}

/// Per-epoch summary; losses are batch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub train_ce: f64,
    pub train_spatial: f64,
    pub train_joint: f64,
    pub test_accuracy: f64,
    pub test_ce: f64,
    pub test_spatial: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
}

/// One row of the training-dynamics table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: &'static str,
    pub accuracy: f64,
    pub ce_loss: f64,
    pub spatial_loss: f64,
}

impl TrainLog {
    pub fn rows(&self) -> Vec<LogRow> {
        self.epochs
            .iter()
            .flat_map(|e| {
                [
                    LogRow {
                        epoch: e.epoch,
                        split: "train",
                        accuracy: e.train_accuracy,
                        ce_loss: e.train_ce,
                        spatial_loss: e.train_spatial,
                    },
                    LogRow {
                        epoch: e.epoch,
                        split: "test",
                        accuracy: e.test_accuracy,
                        ce_loss: e.test_ce,
                        spatial_loss: e.test_spatial,
                    },
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: ModelCheckpoint,
    pub log: TrainLog,
}

/// Progress notifications emitted while training.
#[derive(Debug, Clone, Copy)]
pub enum Progress<'a> {
    Batch(&'a BatchRecord),
    Epoch(&'a EpochRecord),
}

/// Trains a fresh model for `config` on `train` and evaluates on `test`
/// after every epoch. Deterministic in `(config, train, test)`.
pub fn train(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    train_with(config, train, test, &mut |_| {})
}

pub fn train_with(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    observer: &mut dyn FnMut(Progress<'_>),
) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = config.spec;
    let (c, h, w) = spec.arch.input_shape();
    if train.shape() != (c, h, w) || test.shape() != (c, h, w) {
        return Err(Error::input(alloc::format!(
            "{} expects {c}x{h}x{w} images",
            spec.arch.tag()
        )));
    }
    if train.is_empty() {
        return Err(Error::input("empty training set"));
    }
    let grid = TopoGrid::standard();
    let mut model = Model::new(spec);
    let fc1_index = model.param_index("fc1.weight").expect("fc1 present");
    let mut adam = Adam::new(config.lr, config.beta1, config.beta2, config.eps);
    let mut dropout_rng = stream(spec.seed, &[purpose::DROPOUT]);
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        let batches = epoch_batches(train.len(), config.batch_size, spec.seed, epoch as u64);
        let (mut hits, mut seen) = (0usize, 0usize);
        let (mut ce_sum, mut sp_sum, mut joint_sum, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for (bi, idx) in batches.iter().enumerate() {
            // Pearson correlation over a single example is undefined.
            if idx.len() < 2 && spec.constraint != Constraint::None {
                continue;
            }
            let (images, labels) = train.gather(idx);
            let batch = Tensor::new(alloc::vec![idx.len(), c, h, w], images)?;
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, batch, Mode::Train, &mut dropout_rng, true)?;
            let spatial = spatial_loss(
                &mut tape,
                spec.constraint,
                fwd.params[fc1_index],
                fwd.fc1_pre,
                &grid,
            )?;
            let (loss, mut breakdown) = if spec.lambda > 0.0 {
                joint_loss(&mut tape, fwd.logits, &labels, spatial, spec.lambda)?
            } else {
                let (l, mut b) = joint_loss(&mut tape, fwd.logits, &labels, None, 0.0)?;
                b.spatial = spatial.map_or(0.0, |s| tape.value(s).data()[0]);
                (l, b)
            };
            breakdown.lambda = spec.lambda;
            if !breakdown.joint.is_finite() || !breakdown.spatial.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    ce: breakdown.ce,
                    spatial: breakdown.spatial,
                });
            }
            tape.backward(loss)?;

            let logits = tape.value(fwd.logits).data();
            for (row, &l) in logits.chunks_exact(NUM_CLASSES).zip(&labels) {
                if crate::model::argmax(row) == l {
                    hits += 1;
                }
            }
            seen += labels.len();

            let grads: Vec<&[f64]> = fwd
                .params
                .iter()
                .map(|&v| tape.grad(v).expect("parameters track gradients"))
                .collect();
            let mut params: Vec<&mut [f64]> = model.params.iter_mut().map(|p| p.value.data_mut()).collect();
            adam.step(&mut params, &grads);

            ce_sum += breakdown.ce;
            sp_sum += breakdown.spatial;
            joint_sum += breakdown.joint;
            steps += 1;
            if config.log_every > 0 && bi % config.log_every == 0 {
                let rec = BatchRecord {
                    epoch,
                    batch: bi,
                    loss: breakdown,
                };
                observer(Progress::Batch(&rec));
                log.batches.push(rec);
            }
        }
        let (test_accuracy, test_ce, test_spatial) = evaluate_split(&model, test, config.batch_size, &grid)?;
        let steps = steps.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            train_accuracy: hits as f64 / seen.max(1) as f64,
            train_ce: ce_sum / steps,
            train_spatial: sp_sum / steps,
            train_joint: joint_sum / steps,
            test_accuracy,
            test_ce,
            test_spatial,
        };
        observer(Progress::Epoch(&rec));
        log.epochs.push(rec);
    }

    let last = log.epochs.last().copied().expect("at least one epoch");
    let checkpoint = ModelCheckpoint::from_model(
        &model,
        config.epochs as u32,
        config.batch_size as u32,
        last.train_accuracy,
        last.test_accuracy,
    );
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
    })
}

/// Accuracy, mean cross-entropy and mean spatial loss (for the model's own
/// constraint, over chunks of `chunk` images) on `ds` in evaluation mode.
pub fn evaluate_split(model: &Model, ds: &Dataset, chunk: usize, grid: &TopoGrid) -> Result<(f64, f64, f64)> {
    if ds.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let out = model.evaluate(&ds.images, ds.len(), chunk)?;
    let accuracy = out.accuracy(&ds.labels);
    let mut ce = 0.0;
    for (row, &l) in out.logits.chunks_exact(NUM_CLASSES).zip(&ds.labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
        ce += -(row[l as usize] - max - libm::log(z));
    }
    ce /= ds.len() as f64;

    let constraint = model.spec.constraint;
    let spatial = match constraint {
        Constraint::None => 0.0,
        _ => {
            let units = crate::grid::GRID_UNITS;
            let mut total = 0.0;
            let mut chunks = 0usize;
            for rows in out.fc1_pre.chunks(chunk.max(2) * units) {
                if rows.len() < 2 * units {
                    continue;
                }
                let mut tape = Tape::new();
                let w = tape.leaf(model.fc1_weights().clone(), false);
                let a = tape.leaf(Tensor::new(alloc::vec![rows.len() / units, units], rows.to_vec())?, false);
                if let Some(s) = spatial_loss(&mut tape, constraint, w, a, grid)? {
                    total += tape.value(s).data()[0];
                    chunks += 1;
                }
            }
            total / chunks.max(1) as f64
        }
    };
    Ok((accuracy, ce, spatial))
}
