//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"RSPH"
//! version  u32
//! meta_len u64, then meta_len bytes of UTF-8 metadata (caller-defined)
//! count    u32
//! count × { name_len u32, name bytes, ndim u32, dims u64 × ndim, offset u64 }
//! payload  f64 little-endian values; `offset` counts f64 elements
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RSPH";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(metadata: impl Into<String>) -> Self {
        Self {
            metadata: metadata.into(),
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every parameter of `store` under `prefix` + name.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, t) in store.iter() {
            t.check_finite("checkpoint")?;
            let plain = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
            self.tensors.insert(format!("{prefix}{name}"), plain);
        }
        Ok(())
    }

    /// Extracts tensors whose names start with `prefix`, stripping it.
    pub fn store(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest.to_string(), t.clone());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        buf.extend_from_slice(self.metadata.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            t.check_finite("checkpoint")?;
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&offset.to_le_bytes());
            offset += t.numel() as u64;
        }
        for t in self.tensors.values() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TensorError::Checkpoint("bad magic header".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TensorError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u64()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| TensorError::Checkpoint("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| TensorError::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            manifest.push((name, dims, offset));
        }
        let payload = &bytes[r.pos..];
        let mut tensors = BTreeMap::new();
        for (name, dims, offset) in manifest {
            let n: usize = dims.iter().product();
            let start = offset * 8;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(TensorError::Checkpoint(format!("tensor `{name}` runs past the payload")));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data)?;
            t.check_finite("checkpoint")?;
            tensors.insert(name, t);
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Checkpoint("truncated file".into()));
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
}
