//! Flat binary container of named `f64` arrays with a JSON manifest.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "SLOTCKPT"
//! offset 8   u32       format version (1)
//! offset 12  u64       manifest length M in bytes
//! offset 20  M bytes   UTF-8 JSON manifest
//! offset 20+M          data section: concatenated little-endian f64 arrays
//! ```
//!
//! The manifest is `{"version": 1, "metadata": <any JSON>, "tensors": [...]}`
//! where each tensor entry is `{"name", "shape", "dtype": "f64", "offset",
//! "len"}`; `offset` counts bytes from the start of the data section and `len`
//! is the number of elements. Entries appear in parameter registration order,
//! so equal stores serialize to identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SLOTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form metadata read back from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: serde_json::Value,
}

pub fn encode(store: &ParamStore, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            len: t.numel() as u64,
        });
        offset += 8 * t.numel() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        version: VERSION,
        metadata: metadata.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(20 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |detail: String| Error::Format {
        kind: "checkpoint",
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing SLOTCKPT magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("manifest length exceeds file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..data_start])
        .map_err(|e| bad(format!("manifest: {e}")))?;
    let data = &bytes[data_start..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        if entry.dtype != "f64" {
            return Err(bad(format!(
                "{}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let n = entry.len as usize;
        if entry.shape.iter().product::<usize>() != n {
            return Err(bad(format!(
                "{}: shape {:?} does not hold {n} values",
                entry.name, entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start
            .checked_add(8 * n)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| bad(format!("{}: data out of range", entry.name)))?;
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((entry.name, Tensor::new(&entry.shape, values)?));
    }
    Ok(Checkpoint {
        tensors,
        metadata: manifest.metadata,
    })
}

pub fn save(path: &Path, store: &ParamStore, metadata: &serde_json::Value) -> Result<()> {
    let bytes = encode(store, metadata)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
