//! Model checkpoints and adapted-parameter deltas.
//!
//! `FOE1` checkpoint layout (little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic | `b"FOE1"` |
//! | version | `u32` (= 1) |
//! | norm layer count, then channels per layer | `u32`, `u32`... |
//! | norm kernel | `u32` |
//! | task depth, base channels, kernel, classes | `u32` x 4 |
//! | tap point (0 post-ReLU, 1 pre-ReLU) | `u8` |
//! | iteration | `u64` |
//! | validation Dice (NaN when absent) | `f64` |
//! | tensor count | `u32` |
//! | tensors: rank `u32`, dims `u64`..., payload `f64`... | norm params then task params |
//! | per batchnorm: present flag `u8`, then mean and var tensors | |
//!
//! `FTD1` delta layout: magic, version `u32`, base checkpoint fingerprint
//! `u64`, tensor count `u32`, then the normalization-module tensors.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::layers::RunningStats;
use super::model::{Model, NormModuleConfig, TapPoint, TaskNetConfig};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FOE1";
const DELTA_MAGIC: &[u8; 4] = b"FTD1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub iteration: usize,
    pub val_dice: Option<f64>,
}

/// First 8 bytes of SHA-256, little-endian.
pub fn fingerprint_bytes(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(m.norm.config.channels.len() as u32);
        for c in &m.norm.config.channels {
            w.u32(*c as u32);
        }
        w.u32(m.norm.config.kernel as u32);
        let tc = &m.task.config;
        for v in [tc.depth, tc.base_channels, tc.kernel, tc.n_classes] {
            w.u32(v as u32);
        }
        w.u8(match tc.tap_point {
            TapPoint::PostActivation => 0,
            TapPoint::PreActivation => 1,
        });
        w.u64(self.iteration as u64);
        w.f64(self.val_dice.unwrap_or(f64::NAN));
        let params: Vec<&Tensor> = m.norm.params().into_iter().chain(m.task.params()).collect();
        w.u32(params.len() as u32);
        for p in params {
            w.tensor(p);
        }
        for bn in &m.task.bns {
            match &bn.running {
                Some(r) => {
                    w.u8(1);
                    w.tensor(&Tensor::from_vec(r.mean.clone()));
                    w.tensor(&Tensor::from_vec(r.var.clone()));
                }
                None => w.u8(0),
            }
        }
        w.into_inner()
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_bytes(&self.to_bytes())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let n_norm = r.u32()? as usize;
        if n_norm > 64 {
            return Err(Error::format("implausible normalization layer count"));
        }
        let channels = (0..n_norm).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let norm_cfg = NormModuleConfig { channels, kernel: r.u32()? as usize };
        let (depth, base, kernel, classes) =
            (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if depth > 16 || base > 4096 || classes > 255 {
            return Err(Error::format("implausible task network config"));
        }
        let tap_point = match r.u8()? {
            0 => TapPoint::PostActivation,
            1 => TapPoint::PreActivation,
            t => return Err(Error::format(format!("unknown tap point {t}"))),
        };
        let task_cfg = TaskNetConfig { depth, base_channels: base, kernel, n_classes: classes, tap_point };
        let iteration = r.u64()? as usize;
        let vd = r.f64()?;
        let val_dice = if vd.is_nan() { None } else { Some(vd) };
        let mut model = Model::new(norm_cfg, task_cfg, 0).map_err(|e| Error::format(e.to_string()))?;
        let count = r.u32()? as usize;
        {
            let mut params = model.norm.params_mut();
            params.extend(model.task.params_mut());
            if count != params.len() {
                return Err(Error::format(format!("{count} tensors, architecture needs {}", params.len())));
            }
            for p in params {
                let t = r.tensor()?;
                if t.shape() != p.shape() {
                    return Err(Error::format(format!("tensor shape {:?}, expected {:?}", t.shape(), p.shape())));
                }
                *p = t;
            }
        }
        for bn in model.task.bns.iter_mut() {
            bn.running = match r.u8()? {
                0 => None,
                1 => {
                    let (mean, var) = (r.tensor()?.into_data(), r.tensor()?.into_data());
                    if mean.len() != bn.channels() || var.len() != bn.channels() {
                        return Err(Error::format("running statistics size mismatch"));
                    }
                    Some(RunningStats { mean, var })
                }
                f => return Err(Error::format(format!("bad running-stats flag {f}"))),
            };
        }
        r.finish()?;
        Ok(Self { model, iteration, val_dice })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<u64> {
    let bytes = ckpt.to_bytes();
    fs::write(path, &bytes)?;
    Ok(fingerprint_bytes(&bytes))
}

/// Loads a checkpoint and returns it with its fingerprint.
pub fn load_checkpoint(path: &Path) -> Result<(ModelCheckpoint, u64)> {
    let bytes = fs::read(path)?;
    Ok((ModelCheckpoint::from_bytes(&bytes)?, fingerprint_bytes(&bytes)))
}

/// Adapted normalization-module parameters relative to a base checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiDelta {
    pub base_fingerprint: u64,
    pub params: Vec<Tensor>,
}

impl PhiDelta {
    pub fn from_model(model: &Model, base_fingerprint: u64) -> Self {
        Self { base_fingerprint, params: model.norm.params().into_iter().cloned().collect() }
    }

    /// Installs the adapted parameters into `model` (built from the base checkpoint).
    pub fn apply(&self, model: &mut Model, base_fingerprint: u64) -> Result<()> {
        if base_fingerprint != self.base_fingerprint {
            return Err(Error::Fingerprint { expected: base_fingerprint, found: self.base_fingerprint });
        }
        let params = model.norm.params_mut();
        if params.len() != self.params.len() {
            return Err(Error::shape("delta does not match the normalization module"));
        }
        for (p, d) in params.into_iter().zip(&self.params) {
            if p.shape() != d.shape() {
                return Err(Error::shape(format!("delta tensor {:?} vs {:?}", d.shape(), p.shape())));
            }
            *p = d.clone();
        }
        Ok(())
    }
}

pub fn save_phi_delta(path: &Path, delta: &PhiDelta) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(DELTA_MAGIC);
    w.u32(VERSION);
    w.u64(delta.base_fingerprint);
    w.u32(delta.params.len() as u32);
    for p in &delta.params {
        w.tensor(p);
    }
    fs::write(path, w.into_inner())?;
    Ok(())
}

pub fn load_phi_delta(path: &Path) -> Result<PhiDelta> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.expect_magic(DELTA_MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("delta version {version}, expected {VERSION}")));
    }
    let base_fingerprint = r.u64()?;
    let n = r.u32()? as usize;
    if n > 1024 {
        return Err(Error::format("implausible delta tensor count"));
    }
    let params = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(PhiDelta { base_fingerprint, params })
}
