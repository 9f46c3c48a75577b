//! Flat binary parameter container.
//!
//! Layout:
//!
//! ```text
//! u64 LE           header length in bytes
//! [header]         UTF-8 JSON: {"meta": …, "tensors": [{"name", "shape", "offset"}, …]}
//! [data]           f64 LE values; `offset` is in bytes from the start of this section
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(tensors: &[(String, &Tensor)], meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel() * 8;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        meta,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor)>)> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Container("truncated length prefix".into()))?;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes
        .get(8..8usize.saturating_add(hlen))
        .ok_or_else(|| Error::Container("truncated header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    let data = &bytes[8 + hlen..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        let chunk = data
            .get(e.offset..e.offset + numel * 8)
            .ok_or_else(|| Error::Container(format!("tensor `{}` out of bounds", e.name)))?;
        let values = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), values)?));
    }
    Ok((header, out))
}

pub fn save(path: &Path, tensors: &[(String, &Tensor)], meta: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(tensors, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Header, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
