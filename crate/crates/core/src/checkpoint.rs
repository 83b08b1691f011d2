//! Flat named-tensor archive used for codec, denoiser and adapter checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes   "SWMTNSR\0"
//! version  u32 LE
//! hlen     u64 LE    length of the JSON header
//! header   hlen bytes { "kind", "metadata", "tensors": [{name, dtype, shape, offset}] }
//! payload  contiguous little-endian f64 tensors, offsets relative to payload start
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"SWMTNSR\0";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode<M: Serialize>(kind: &str, metadata: &M, tensors: &ParamStore) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, m) in tensors.iter() {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f64".into(),
            shape: [m.nrows(), m.ncols()],
            offset,
        });
        offset += (m.len() * 8) as u64;
    }
    let header = Header {
        kind: kind.to_string(),
        metadata: serde_json::to_value(metadata)?,
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, m) in tensors.iter() {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses an archive, checking its kind tag, and deserializes the metadata
/// block into `M`.
pub fn decode<M: DeserializeOwned>(bytes: &[u8], expected_kind: &str) -> Result<(M, ParamStore)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::corrupt("bad magic or truncated header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::corrupt(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = 20usize
        .checked_add(hlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::corrupt("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[20..payload_start])
        .map_err(|e| Error::corrupt(format!("header: {e}")))?;
    if header.kind != expected_kind {
        return Err(Error::corrupt(format!(
            "expected a {expected_kind} checkpoint, found {}",
            header.kind
        )));
    }
    let payload = &bytes[payload_start..];
    let mut store = ParamStore::new();
    let mut expected_offset = 0u64;
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return Err(Error::corrupt(format!("{}: dtype {}", entry.name, entry.dtype)));
        }
        if entry.offset != expected_offset {
            return Err(Error::corrupt(format!("{}: non-contiguous offset", entry.name)));
        }
        let count = entry.shape[0] * entry.shape[1];
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > payload.len() {
            return Err(Error::corrupt(format!("{}: payload truncated", entry.name)));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Mat::from_shape_vec((entry.shape[0], entry.shape[1]), values)
            .map_err(|e| Error::corrupt(format!("{}: {e}", entry.name)))?;
        store.insert(entry.name.clone(), m);
        expected_offset = end as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(Error::corrupt("trailing bytes after payload"));
    }
    let metadata = serde_json::from_value(header.metadata)
        .map_err(|e| Error::corrupt(format!("metadata: {e}")))?;
    Ok((metadata, store))
}

pub fn save<M: Serialize>(path: &Path, kind: &str, metadata: &M, tensors: &ParamStore) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode(kind, metadata, tensors)?)?;
    Ok(())
}

pub fn load<M: DeserializeOwned>(path: &Path, expected_kind: &str) -> Result<(M, ParamStore)> {
    let bytes = fs::read(path)?;
    decode(&bytes, expected_kind)
}

/// Checks that every tensor in `expected` exists in `found` with the same
/// shape, naming the first offending tensor.
pub fn check_shapes(expected: &ParamStore, found: &ParamStore) -> Result<()> {
    for (name, m) in expected.iter() {
        match found.get(name) {
            None => return Err(Error::corrupt(format!("missing tensor {name}"))),
            Some(f) if f.dim() != m.dim() => {
                return Err(Error::corrupt(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    f.dim(),
                    m.dim()
                )))
            }
            _ => {}
        }
    }
    if found.len() != expected.len() {
        return Err(Error::corrupt("unexpected extra tensors"));
    }
    Ok(())
}
