//! Little-endian checkpoint container.
//!
//! ```text
//! magic        4 bytes  "BSL1"
//! input_size   u32
//! stage_ch     4 x u32
//! reduced_ch   u32
//! norm_groups  u32
//! seed         u64
//! count        u32
//! count records:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   ndim       u32
//!   dims       ndim x u32
//!   data       prod(dims) x f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BSL1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub records: ParamSet<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + 8 * self.records.num_scalars());
        out.extend_from_slice(MAGIC);
        let c = &self.config;
        put_u32(&mut out, c.input_size)?;
        for &ch in &c.stage_channels {
            put_u32(&mut out, ch)?;
        }
        put_u32(&mut out, c.reduced_channels)?;
        put_u32(&mut out, c.norm_groups)?;
        out.extend_from_slice(&c.seed.to_le_bytes());
        put_u32(&mut out, self.records.len())?;
        for (name, t) in self.records.iter() {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let input_size = r.u32()?;
        let mut stage_channels = [0; 4];
        for ch in &mut stage_channels {
            *ch = r.u32()?;
        }
        let config = ModelConfig {
            input_size,
            stage_channels,
            reduced_channels: r.u32()?,
            norm_groups: r.u32()?,
            seed: u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
        };
        let count = r.u32()?;
        let mut records = ParamSet::new();
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("record {name}: shape overflows")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("record too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            records.push(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last record",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Records whose names start with `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> ParamSet<f64> {
        let mut out = ParamSet::new();
        for (name, t) in self.records.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.push(rest, t.clone());
            }
        }
        out
    }

    /// Appends every tensor of `set` under `prefix`.
    pub fn push_section(&mut self, prefix: &str, set: &ParamSet<f64>) {
        for (name, t) in set.iter() {
            self.records.push(format!("{prefix}{name}"), t.clone());
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}
