//! Named-array checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MAGTRKCK"
//! version    u32
//! meta_len   u64, then meta_len bytes of canonical JSON metadata
//! count      u64, then `count` arrays:
//!   name_len u32, UTF-8 name
//!   dtype    u8 (1 = f64)
//!   rank     u32, then rank × u64 extents
//!   payload  f64 × product(extents)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use magtrack_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::optim::{AdamState, PlateauScheduler};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::loss::LossState;
use crate::preprocess::NormStats;
use crate::tfbrt::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"MAGTRKCK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub train: TrainConfig,
    pub adam: AdamState,
    pub loss_state: LossState,
    pub scheduler: PlateauScheduler,
    pub epoch: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model_config: ModelConfig,
    train_config: TrainConfig,
    norm: NormStats,
    vel_scale: f64,
    adam_t: u64,
    loss_state: LossState,
    scheduler: PlateauScheduler,
    epoch: u64,
    step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            model_config: self.model.config.clone(),
            train_config: self.train.clone(),
            norm: self.model.norm.clone(),
            vel_scale: self.model.vel_scale,
            adam_t: self.adam.t,
            loss_state: self.loss_state.clone(),
            scheduler: self.scheduler.clone(),
            epoch: self.epoch,
            step: self.step,
        };
        // Round-trip through Value so object keys come out sorted.
        let meta = serde_json::to_vec(&serde_json::to_value(&meta)?)?;
        let mut arrays: Vec<(String, &Tensor)> = Vec::new();
        arrays.extend(self.model.arrays.iter().map(|(k, t)| (format!("param/{k}"), t)));
        arrays.extend(self.adam.m.iter().map(|(k, t)| (format!("adam.m/{k}"), t)));
        arrays.extend(self.adam.v.iter().map(|(k, t)| (format!("adam.v/{k}"), t)));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, meta.len() as u64);
        out.extend_from_slice(&meta);
        put_u64(&mut out, arrays.len() as u64);
        for (name, t) in arrays {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            put_u32(&mut out, t.rank() as u32);
            for &e in t.shape() {
                put_u64(&mut out, e as u64);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let meta_len = r.len()?;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let count = r.len()?;
        let mut params = BTreeMap::new();
        let mut adam = AdamState {
            t: meta.adam_t,
            ..AdamState::default()
        };
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            if r.u8()? != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("array {name}: unsupported dtype")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= buf.len()))
                .ok_or_else(|| Error::Checkpoint(format!("array {name}: implausible shape {shape:?}")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
            let (kind, key) = name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("array {name} lacks a section prefix")))?;
            let slot = match kind {
                "param" => &mut params,
                "adam.m" => &mut adam.m,
                "adam.v" => &mut adam.v,
                _ => return Err(Error::Checkpoint(format!("unknown array section {kind}"))),
            };
            if slot.insert(key.to_string(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array {name}")));
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        let model = ModelParams {
            config: meta.model_config,
            arrays: params,
            norm: meta.norm,
            vel_scale: meta.vel_scale,
        };
        model.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            model,
            train: meta.train_config,
            adam,
            loss_state: meta.loss_state,
            scheduler: meta.scheduler,
            epoch: meta.epoch,
            step: meta.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Fails unless the stored architecture equals `expected`.
    pub fn require_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model.config != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint model config {:?} differs from requested {:?}",
                self.model.config, expected
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
