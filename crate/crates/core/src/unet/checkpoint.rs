//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"TTMC"`, `u32` version, `u32` metadata length, TOML metadata (model
//! config, schedule, step), `u32` tensor count, then per tensor: `u32` name
//! length, UTF-8 name, `u32` rank, `u32` dims, `f32` values. An optional
//! optimizer section follows: `u32` flag, `u64` step, `u32` count, then
//! named first- and second-moment tensors in the same encoding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{UNetConfig, UNetWeights};
use crate::error::{Error, Result};
use crate::formats::write_atomic;
use crate::scalar::Scalar;
use crate::schedule::ScheduleSpec;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TTMC";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    step: u64,
    schedule: ScheduleSpec,
    config: UNetConfig,
}

/// AdamW moments captured for resuming.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot<T> {
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: UNetConfig,
    pub schedule: ScheduleSpec,
    /// Completed optimizer updates.
    pub step: u64,
    pub weights: UNetWeights<T>,
    pub optimizer: Option<OptimizerSnapshot<T>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "non-UTF-8 name"))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::format(self.path, format!("{name}: implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "tensor too large"))?)?;
        let vals: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Ok((name, Tensor::from_vec(&shape, vals)?))
    }

    fn tensor_map<T: Scalar>(&mut self) -> Result<BTreeMap<String, Tensor<T>>> {
        let count = self.u32()? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = self.tensor()?;
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::format(self.path, format!("duplicate tensor {name}")));
            }
        }
        Ok(map)
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&Meta {
            step: self.step,
            schedule: self.schedule,
            config: self.config.clone(),
        })
        .map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.weights.len() as u32);
        for (name, t) in self.weights.iter() {
            put_tensor(&mut out, name, t);
        }
        match &self.optimizer {
            None => put_u32(&mut out, 0),
            Some(opt) => {
                put_u32(&mut out, 1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for map in [&opt.first, &opt.second] {
                    put_u32(&mut out, map.len() as u32);
                    for (name, t) in map {
                        put_tensor(&mut out, name, t);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| Error::format(path, "metadata is not UTF-8"))?;
        let meta: Meta = toml::from_str(meta).map_err(|e| Error::format(path, format!("metadata: {e}")))?;
        meta.config.validate()?;
        let weights = UNetWeights::from_map(&meta.config, r.tensor_map()?)?;
        let optimizer = match r.u32()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let first = r.tensor_map()?;
                let second = r.tensor_map()?;
                for map in [&first, &second] {
                    for (name, t) in map {
                        let w = weights.get(name)?;
                        if w.shape() != t.shape() {
                            return Err(Error::format(path, format!("optimizer moment {name} has wrong shape")));
                        }
                    }
                }
                Some(OptimizerSnapshot { step, first, second })
            }
            f => return Err(Error::format(path, format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config: meta.config,
            schedule: meta.schedule,
            step: meta.step,
            weights,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(path, &fs::read(path)?)
    }

    /// Content hash of the weights section, hex-encoded (16 chars).
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.weights.iter() {
            buf.clear();
            put_tensor(&mut buf, name, t);
            h.update(&buf);
        }
        hex::encode(&h.finalize()[..8])
    }
}
