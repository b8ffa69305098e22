//! Versioned binary tensor container.
//!
//! Layout: 8-byte magic `LFTENS01`, little-endian `u64` manifest length,
//! the JSON manifest, then the concatenated tensor payloads as
//! little-endian `f32`. Manifest entries record name, shape, byte offset
//! (relative to the payload start) and element count.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LFTENS01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    endianness: String,
    dtype: String,
    config_hash: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug, Default)]
pub struct TensorFile {
    pub config_hash: String,
    pub meta: serde_json::Value,
    tensors: IndexMap<String, Tensor>,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            config_hash: String::new(),
            meta,
            tensors: IndexMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::State(format!("tensor `{name}` missing from container")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len() as u64,
            });
            offset += 4 * t.len() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            version: FORMAT_VERSION,
            endianness: "little".into(),
            dtype: "f32".into(),
            config_hash: self.config_hash.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = BufWriter::new(fs::File::create(path.as_ref())?);
        out.write_all(MAGIC)?;
        out.write_all(&(manifest.len() as u64).to_le_bytes())?;
        out.write_all(&manifest)?;
        for t in self.tensors.values() {
            for &v in t.data() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::load(path, e))?;
        let bad = |why: &str| Error::load(path, why);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a tensor container (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::load(path, e))?;
        if manifest.version != FORMAT_VERSION || manifest.endianness != "little" || manifest.dtype != "f32" {
            return Err(bad("unsupported container version or encoding"));
        }
        let payload = &bytes[body..];
        let mut tensors = IndexMap::new();
        for e in manifest.tensors {
            let start = e.offset as usize;
            let end = start + 4 * e.len as usize;
            if end > payload.len() || e.shape.iter().product::<usize>() != e.len as usize {
                return Err(Error::load(path, format!("tensor `{}` is malformed", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.insert(e.name, Tensor::from_vec(&e.shape, data)?);
        }
        Ok(Self {
            config_hash: manifest.config_hash,
            meta: manifest.meta,
            tensors,
        })
    }
}

/// Hex SHA-256 of a canonical configuration string.
pub fn config_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Rounds to the nearest `f32`, the container's storage precision.
pub fn to_storage(v: f64) -> f64 {
    v as f32 as f64
}
