//! Weight archive container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "IHWA"
//! version    u32      1
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 JSON (ArchiveMeta)
//! count      u32
//! count × entry:
//!   name_len u32
//!   name     name_len bytes UTF-8, e.g. "harmonizer.encoder.block2.res1.conv1.weight"
//!   ndim     u32
//!   dims     ndim × u64
//!   checksum u64      FNV-1a over the data bytes
//!   data     prod(dims) × f32
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IHWA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: u8,
    pub step: u64,
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    /// Training stage that produced the weights; 0 for a fresh initialization.
    pub stage: u8,
    pub step: u64,
    pub config_hash: String,
    pub config: ModelConfig,
    #[serde(default)]
    pub lineage: Vec<LineageEntry>,
    /// Free-form extras (training state scalars, seeds).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ArchiveMeta {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            stage: 0,
            step: 0,
            config_hash: config.hash(),
            config: config.clone(),
            lineage: Vec::new(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightArchive {
    pub meta: ArchiveMeta,
    pub tensors: BTreeMap<String, TensorData>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Archive(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl WeightArchive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::ArchiveParam {
                    param: name.clone(),
                    reason: "shape does not match data length".into(),
                });
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            let data: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            out.extend_from_slice(&fnv1a(&data).to_le_bytes());
            out.extend_from_slice(&data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Archive("not a weight archive (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported archive version {version}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: ArchiveMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Archive(format!("bad metadata: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for i in 0..count {
            let name_len = r.u32("parameter name")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
                .map_err(|_| Error::Archive(format!("parameter #{i} has a non-UTF-8 name")))?
                .to_string();
            let bad = |reason: String| Error::ArchiveParam {
                param: name.clone(),
                reason,
            };
            let ndim = r.u32(&name).map_err(|e| bad(e.to_string()))? as usize;
            if ndim > 8 {
                return Err(bad(format!("implausible rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64(&name).map_err(|e| bad(e.to_string()))? as usize);
            }
            let checksum = r.u64(&name).map_err(|e| bad(e.to_string()))?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| bad("shape overflows".into()))?;
            let raw = r.take(numel, &name).map_err(|e| bad(e.to_string()))?;
            if fnv1a(raw) != checksum {
                return Err(bad("checksum mismatch".into()));
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(name.clone(), TensorData { shape, data }).is_some() {
                return Err(bad("duplicate parameter".into()));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Archive("trailing bytes after last parameter".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
