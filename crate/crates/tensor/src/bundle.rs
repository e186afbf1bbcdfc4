//! Named-tensor bundle files.
//!
//! `<stem>.tb.json` lists `{name, shape, offset}` entries (offset in bytes
//! into the payload); `<stem>.tb.bin` holds the concatenated tensors as
//! little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::{ParamSet, Tensor};

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Manifest and payload paths for a bundle stem.
pub fn bundle_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (with_suffix(stem, ".tb.json"), with_suffix(stem, ".tb.bin"))
}

pub fn write_bundle(stem: &Path, params: &ParamSet<f32>) -> Result<()> {
    let (manifest_path, bin_path) = bundle_paths(stem);
    let mut entries = Vec::with_capacity(params.len());
    let mut payload = Vec::with_capacity(params.numel() * 4);
    for (name, t) in params.iter() {
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_string_pretty(&entries)
        .map_err(|e| TensorError::Format(e.to_string()))?;
    fs::write(manifest_path, manifest)?;
    fs::write(bin_path, payload)?;
    Ok(())
}

pub fn read_bundle(stem: &Path) -> Result<ParamSet<f32>> {
    let (manifest_path, bin_path) = bundle_paths(stem);
    let text = fs::read_to_string(&manifest_path)?;
    let entries: Vec<Entry> = serde_json::from_str(&text)
        .map_err(|e| TensorError::Format(format!("{}: {e}", manifest_path.display())))?;
    let payload = fs::read(&bin_path)?;
    let mut params = ParamSet::new();
    let mut expected_offset = 0u64;
    for e in entries {
        if e.offset != expected_offset {
            return Err(TensorError::Format(format!(
                "tensor {} at offset {}, expected {expected_offset}",
                e.name, e.offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(TensorError::Format(format!(
                "tensor {} runs past the end of the payload",
                e.name
            )));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.push(e.name, Tensor::new(e.shape, data)?)?;
        expected_offset = end as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(TensorError::Format(format!(
            "payload has {} bytes, manifest covers {expected_offset}",
            payload.len()
        )));
    }
    Ok(params)
}
