//! Binary checkpoint format.
//!
//! ```text
//! "EMPS" | version: u32 | count: u32 | count × tensor
//! tensor = name_len: u16 | name: utf-8 | rank: u8 | rank × dim: u32 | f32 payload
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use thiserror::Error;

use super::Network;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMPS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("invalid tensor name")]
    BadName,
    #[error("tensor {name}: {msg}")]
    Tensor { name: String, msg: String },
    #[error("checkpoint is missing tensor {0}")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated(self.pos))?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_owned();
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Tensor {
            name: "<trailer>".into(),
            msg: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

impl Network {
    /// Parameters followed by batchnorm running statistics.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .params()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                dims: p.dims.clone(),
                data: p.data.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        for (name, values) in self.buffers() {
            out.push(NamedTensor {
                name,
                dims: vec![values.len()],
                data: values.iter().map(|&v| v as f32).collect(),
            });
        }
        out
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        encode_tensors(&self.to_named_tensors())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.checkpoint_bytes())?;
        Ok(())
    }

    /// Loads every parameter and buffer by name. All tensors of this network
    /// must be present with matching dimensions.
    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8]) -> Result<(), CheckpointError> {
        let tensors = decode_tensors(bytes)?;
        let find = |name: &str| tensors.iter().find(|t| t.name == name);
        let mut updates = Vec::new();
        for p in self.params() {
            let t = find(&p.name).ok_or_else(|| CheckpointError::Missing(p.name.clone()))?;
            if t.dims != p.dims {
                return Err(CheckpointError::Tensor {
                    name: p.name.clone(),
                    msg: format!("dims {:?} != expected {:?}", t.dims, p.dims),
                });
            }
            updates.push(t);
        }
        let mut buffer_updates = Vec::new();
        for (name, values) in self.buffers() {
            let t = find(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if t.dims != [values.len()] {
                return Err(CheckpointError::Tensor {
                    name,
                    msg: format!("dims {:?} != expected [{}]", t.dims, values.len()),
                });
            }
            buffer_updates.push((name, t));
        }
        for (p, t) in self.params_mut().zip(updates) {
            p.data = t.data.iter().map(|&v| v as f64).collect();
        }
        for (name, t) in buffer_updates {
            let buf = self.buffer_mut(&name).expect("buffer listed above");
            *buf = t.data.iter().map(|&v| v as f64).collect();
        }
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = std::fs::read(path)?;
        self.load_checkpoint_bytes(&bytes)
    }
}
