//! Binary checkpoint container.
//!
//! Layout: magic `TEPC`, `u32` version, `u64` header length, JSON tensor
//! table, raw little-endian `f32` payload, `u64` metadata length, JSON
//! metadata. Parameters are rounded to `f32` before saving, so a load
//! reproduces them bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{MultimodalModel, MultimodalSpec};
use super::train::{RegimeSchedule, TrainConfig, TrainingLog};
use crate::data::{Channel, PreprocessStats, Windows};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"TEPC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Where each named random stream stood when training finished.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub name: String,
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: MultimodalSpec,
    pub stats: PreprocessStats,
    pub windows: Windows,
    pub schedule: RegimeSchedule,
    pub train: TrainConfig,
    pub active: Vec<Channel>,
    pub seed: u64,
    pub log: TrainingLog,
    pub rng: Vec<RngState>,
}

/// A trained model with everything needed to score new data.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn model(&self) -> MultimodalModel {
        MultimodalModel { spec: self.meta.spec.clone(), params: self.params.clone() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut table = Vec::with_capacity(self.params.len());
        let mut payload = Vec::new();
        for (name, t) in self.params.iter() {
            table.push(TensorEntry { name: name.clone(), dtype: "f32".into(), shape: t.shape().to_vec(), offset: payload.len() as u64 });
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&table)?;
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(24 + header.len() + payload.len() + meta.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let mut v = [0u8; 4];
        read_exact(&mut r, &mut v)?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = read_len(&mut r)?;
        let header = take(&mut r, header_len)?;
        let table: Vec<TensorEntry> = serde_json::from_slice(header)?;
        let payload_len: usize = table.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
        let payload = take(&mut r, payload_len)?;
        let mut params = ParamStore::new();
        for e in &table {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("tensor `{}` runs past the payload", e.name)))?;
            let data = raw.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        }
        let meta_len = read_len(&mut r)?;
        let meta: CheckpointMeta = serde_json::from_slice(take(&mut r, meta_len)?)?;
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after metadata", r.len())));
        }
        let ck = Self { params, meta };
        ck.check_params()?;
        Ok(ck)
    }

    /// The tensor table must match what the recorded architecture initializes.
    fn check_params(&self) -> Result<()> {
        let fresh = MultimodalModel::init(self.meta.spec.clone(), 0)?;
        let expected: Vec<(&String, &[usize])> = fresh.params.iter().map(|(k, t)| (k, t.shape())).collect();
        let got: Vec<(&String, &[usize])> = self.params.iter().map(|(k, t)| (k, t.shape())).collect();
        if expected != got {
            return Err(Error::Format("checkpoint tensors do not match the recorded architecture".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    let head = take(r, buf.len())?;
    buf.copy_from_slice(head);
    Ok(())
}

fn read_len(r: &mut &[u8]) -> Result<usize> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("length overflows usize".into()))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format(format!("truncated checkpoint: need {n} bytes, have {}", r.len())));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}
