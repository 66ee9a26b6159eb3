//! Binary checkpoint codec.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "TOPOCKPT"
//! 8       4     format version (u32, currently 1)
//! 12      1     arch tag (1 = mnist, 2 = cifar)
//! 13      1     constraint tag (0 = control, 1 = ws, 2 = as, 3 = as_global)
//! 14      2     reserved, zero
//! 16      8     lambda (f64)
//! 24      8     seed (u64)
//! 32      4     epoch (u32)
//! 36      4     batch size (u32)
//! 40      8     train accuracy at save time (f64)
//! 48      8     test accuracy at save time (f64)
//! 56      4     block count (u32)
//! 60      ...   blocks
//! ```
//!
//! Each block is `name_len: u16, name: utf-8, ndim: u8, dims: u32 × ndim,
//! values: f64 × product(dims)`. Trainable parameters come first in model
//! order, followed by `bn<k>.running_mean` / `bn<k>.running_var` pairs.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::GRID_UNITS;
use crate::model::{Arch, Model, ModelSpec, Param};
use crate::spatial::Constraint;
use crate::tensor::{BatchNormState, Tensor};

pub const MAGIC: &[u8; 8] = b"TOPOCKPT";
pub const VERSION: u32 = 1;

/// Serialized state of a trained model plus training provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub spec: ModelSpec,
    pub epoch: u32,
    pub batch_size: u32,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub blocks: Vec<(String, Tensor)>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model, epoch: u32, batch_size: u32, train_accuracy: f64, test_accuracy: f64) -> Self {
        let mut blocks: Vec<(String, Tensor)> = model
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (i, bn) in model.bn.iter().enumerate() {
            blocks.push((
                alloc::format!("bn{}.running_mean", i + 1),
                Tensor::from_vec(bn.running_mean.clone()),
            ));
            blocks.push((
                alloc::format!("bn{}.running_var", i + 1),
                Tensor::from_vec(bn.running_var.clone()),
            ));
        }
        Self {
            spec: model.spec,
            epoch,
            batch_size,
            train_accuracy,
            test_accuracy,
            blocks,
        }
    }

    /// Rebuilds the model, checking every block against the architecture.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.spec);
        for p in model.params.iter_mut() {
            let (_, t) = self
                .blocks
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::format(alloc::format!("checkpoint lacks block {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::format(alloc::format!(
                    "block {} has shape {:?}, architecture expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            *p = Param {
                name: p.name.clone(),
                value: t.clone(),
            };
        }
        for (i, bn) in model.bn.iter_mut().enumerate() {
            let fetch = |suffix: &str| -> Result<Vec<f64>> {
                let name = alloc::format!("bn{}.{suffix}", i + 1);
                self.blocks
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t.data().to_vec())
                    .ok_or_else(|| Error::format(alloc::format!("checkpoint lacks block {name}")))
            };
            let mean = fetch("running_mean")?;
            let var = fetch("running_var")?;
            if mean.len() != bn.running_mean.len() || var.len() != bn.running_var.len() {
                return Err(Error::format(alloc::format!("bn{} statistics have wrong length", i + 1)));
            }
            *bn = BatchNormState {
                running_mean: mean,
                running_var: var,
                ..BatchNormState::new(bn.running_mean.len())
            };
        }
        let fc1 = model.fc1_weights().shape();
        if fc1 != [GRID_UNITS, self.spec.arch.fc1_fan_in()] {
            return Err(Error::format(alloc::format!("fc1 weight shape {fc1:?}")));
        }
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.spec.arch.code());
        out.push(self.spec.constraint.code());
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.spec.lambda.to_le_bytes());
        out.extend_from_slice(&self.spec.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.batch_size.to_le_bytes());
        out.extend_from_slice(&self.train_accuracy.to_le_bytes());
        out.extend_from_slice(&self.test_accuracy.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(alloc::format!("unsupported checkpoint version {version}")));
        }
        let arch = r.u8()?;
        let arch = Arch::from_code(arch).ok_or_else(|| Error::format(alloc::format!("unknown arch tag {arch}")))?;
        let constraint = r.u8()?;
        let constraint = Constraint::from_code(constraint)
            .ok_or_else(|| Error::format(alloc::format!("unknown constraint tag {constraint}")))?;
        r.take(2)?;
        let lambda = r.f64()?;
        let seed = r.u64()?;
        let epoch = r.u32()?;
        let batch_size = r.u32()?;
        let train_accuracy = r.f64()?;
        let test_accuracy = r.f64()?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = core::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("block name is not utf-8"))?
                .into();
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            blocks.push((name, Tensor::new(shape, data)?));
        }
        if r.at != bytes.len() {
            return Err(Error::format("trailing bytes after last block"));
        }
        Ok(Self {
            spec: ModelSpec {
                arch,
                constraint,
                lambda,
                seed,
            },
            epoch,
            batch_size,
            train_accuracy,
            test_accuracy,
            blocks,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::format("checkpoint truncated"))?;
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}
