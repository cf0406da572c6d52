//! On-disk tensor archive: a directory with `manifest.json` and `data.bin`.
//!
//! The manifest maps each name to `{shape, dtype, offset, length}` where
//! `offset` and `length` count `f32` elements into `data.bin`. Payloads are
//! little-endian and concatenated in manifest (lexicographic name) order.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_archive(dir: &Path, tensors: &[(String, Tensor<f32>)]) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let sorted: BTreeMap<&str, &Tensor<f32>> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if sorted.len() != tensors.len() {
        return Err(invalid("duplicate tensor names"));
    }
    let mut manifest = BTreeMap::new();
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (name, t) in sorted {
        manifest.insert(
            name.to_string(),
            ArchiveEntry { shape: t.shape().to_vec(), dtype: "f32".into(), offset, length: t.len() },
        );
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)?;
    fs::write(dir.join("manifest.json"), json)?;
    fs::write(dir.join("data.bin"), bytes)
}

pub fn read_archive(dir: &Path) -> io::Result<Vec<(String, Tensor<f32>)>> {
    let manifest: BTreeMap<String, ArchiveEntry> =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?).map_err(io::Error::other)?;
    let bytes = fs::read(dir.join("data.bin"))?;
    let mut out = Vec::with_capacity(manifest.len());
    for (name, e) in manifest {
        if e.dtype != "f32" {
            return Err(invalid(format!("{name}: unsupported dtype {}", e.dtype)));
        }
        let (start, end) = (e.offset * 4, (e.offset + e.length) * 4);
        let raw = bytes.get(start..end).ok_or_else(|| invalid(format!("{name}: payload out of range")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(e.shape, data).map_err(|err| invalid(format!("{name}: {err}")))?;
        out.push((name, t));
    }
    Ok(out)
}
