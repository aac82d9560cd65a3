//! Self-describing tensor archives used for checkpoints and pretrained
//! weights.
//!
//! Layout: the magic line `WBCK1\n`, a little-endian `u64` header length, a
//! JSON header, then every tensor as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"WBCK1\n";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt archive: {0}")]
    Corrupt(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(meta: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: (*name).to_string(),
                shape: t.shape.clone(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Archive, ArchiveError> {
    let corrupt = |m: &str| ArchiveError::Corrupt(m.to_string());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| corrupt("bad magic"))?;
    if rest.len() < 8 {
        return Err(corrupt("truncated header length"));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(corrupt("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&rest[..len]).map_err(|e| ArchiveError::Corrupt(format!("header: {e}")))?;
    let blob = &rest[len..];
    if blob.len() % 4 != 0 {
        return Err(corrupt("blob length is not a multiple of 4"));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| ArchiveError::Corrupt(format!("tensor {} out of bounds", e.name)))?;
        tensors.push((e.name, Tensor::new(e.shape, data.to_vec())));
    }
    Ok(Archive {
        meta: header.meta,
        tensors,
    })
}

pub fn write_archive(path: &Path, meta: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<(), ArchiveError> {
    let io = |source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode(meta, tensors)).map_err(io)
}

pub fn read_archive(path: &Path) -> Result<Archive, ArchiveError> {
    let bytes = fs::read(path).map_err(|source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejects_garbage() {
        let a = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE]);
        let b = Tensor::scalar(7.0);
        let meta = serde_json::json!({"epoch": 3});
        let bytes = encode(&meta, &[("a", &a), ("b", &b)]);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.get("a"), Some(&a));
        assert_eq!(back.get("b"), Some(&b));
        assert!(decode(b"nope").is_err());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
