//! `RMCK` checkpoints: training step, config snapshot and a named tensor table.
//!
//! Layout (little-endian): magic `RMCK`, u32 version, u64 step, u32 config
//! byte length + UTF-8 config text, u32 tensor count, then per tensor a u32
//! name length + name, u32 rank, u64 dims and raw f64 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::RunConfig;
use crate::binio::{dim_u32, put_f64s, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"RMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        put_u64(w, self.step)?;
        let text = self.config.to_text();
        put_u32(w, dim_u32("config length", text.len())?)?;
        w.write_all(text.as_bytes())?;
        put_u32(w, dim_u32("tensor count", self.params.len())?)?;
        for (name, t) in self.params.iter() {
            put_u32(w, dim_u32("name length", name.len())?)?;
            w.write_all(name.as_bytes())?;
            put_u32(w, dim_u32("rank", t.ndim())?)?;
            for &d in t.shape() {
                put_u64(w, d as u64)?;
            }
            put_f64s(w, t.data())?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader::new(r, "checkpoint");
        r.magic(MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let step = r.u64()?;
        let len = r.u32()? as usize;
        let text = String::from_utf8(r.bytes(len)?)
            .map_err(|_| Error::invalid("checkpoint config is not UTF-8"))?;
        let config = RunConfig::parse(&text)?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.bytes(n)?)
                .map_err(|_| Error::invalid("checkpoint tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Truncated("checkpoint"))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .ok_or(Error::Truncated("checkpoint"))?;
            params.insert(name, Tensor::new(shape, r.f64s(numel)?)?);
        }
        Ok(Checkpoint { step, config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_from(BufReader::new(file))
    }
}
