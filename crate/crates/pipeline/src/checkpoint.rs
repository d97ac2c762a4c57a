//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! b"MCLDCKPT"  u32 version  u8 stage  u64 step
//! u32 header length, header JSON {config, skeleton, schedule, optimizer_step}
//! parameter block  (f32 values)
//! first-moment block, second-moment block  (f64 values)
//! ```
//!
//! A block is `u32 count` followed by entries
//! `u16 name length, name, u32 rows, u32 cols, values`.

use std::io::{Read, Write};
use std::path::Path;

use mcld_core::diffusion::DiffusionSchedule;
use mcld_core::domain::SkeletonSpec;
use mcld_core::nn::{AdamW, ParamStore};
use mcld_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io, Error, Result};

pub const MAGIC: &[u8; 8] = b"MCLDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vae,
    Diffusion,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Vae => 1,
            Stage::Diffusion => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            1 => Ok(Stage::Vae),
            2 => Ok(Stage::Diffusion),
            other => Err(Error::BadCheckpoint(format!("unknown stage tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Optimizer steps completed in this stage.
    pub step: usize,
    pub config: RunConfig,
    pub skeleton: SkeletonSpec,
    pub schedule: DiffusionSchedule,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    skeleton: SkeletonSpec,
    schedule: DiffusionSchedule,
    optimizer_step: u64,
}

fn write_block(out: &mut Vec<u8>, store: &ParamStore, wide: bool) {
    out.extend((store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rows() as u32).to_le_bytes());
        out.extend((t.cols() as u32).to_le_bytes());
        for &v in t.data() {
            if wide {
                out.extend(v.to_le_bytes());
            } else {
                out.extend((v as f32).to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::BadCheckpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn block(&mut self, wide: bool) -> Result<ParamStore> {
        let count = self.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = self.u16()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::BadCheckpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let n = rows * cols;
            let data: Vec<f64> = if wide {
                self.take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            } else {
                self.take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect()
            };
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::BadCheckpoint(format!("non-finite values in {name}")));
            }
            store.insert(name, Tensor::from_vec(rows, cols, data));
        }
        Ok(store)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.push(self.stage.tag());
        out.extend((self.step as u64).to_le_bytes());
        let header = Header {
            config: self.config.clone(),
            skeleton: self.skeleton.clone(),
            schedule: self.schedule.clone(),
            optimizer_step: self.optimizer.step,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(json);
        write_block(&mut out, &self.params, false);
        write_block(&mut out, &self.optimizer.first_moment, true);
        write_block(&mut out, &self.optimizer.second_moment, true);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::BadCheckpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
        }
        let stage = Stage::from_tag(r.take(1)?[0])?;
        let step = r.u64()? as usize;
        let len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::BadCheckpoint(format!("header: {e}")))?;
        let params = r.block(false)?;
        let mut optimizer = AdamW::new(header.config.optimizer.adamw());
        optimizer.step = header.optimizer_step;
        optimizer.first_moment = r.block(true)?;
        optimizer.second_moment = r.block(true)?;
        if r.pos != bytes.len() {
            return Err(Error::BadCheckpoint("trailing bytes".into()));
        }
        Ok(Self {
            stage,
            step,
            config: header.config,
            skeleton: header.skeleton,
            schedule: header.schedule,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(io(path))?;
        f.write_all(&self.to_bytes()).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io(path))?;
        Self::from_bytes(&bytes)
    }

    /// Parameters as they will read back from disk (rounded to `f32`).
    pub fn stored_params(&self) -> ParamStore {
        let mut p = self.params.clone();
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
        p
    }
}
