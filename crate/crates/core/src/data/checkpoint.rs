//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | `0..8`           | magic `CONMAMBA`                          |
//! | `8..16`          | `u64` header length `n`                   |
//! | `16..16+n`       | UTF-8 JSON header                         |
//! | `16+n..`         | payload: `f64` tensor data, back to back  |
//!
//! The header is `{"format_version", "kind", "config", "meta", "tensors"}`
//! where each tensor entry is `{"name", "shape", "offset", "len"}`; `offset`
//! is in bytes from the start of the payload and `len` counts elements.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CONMAMBA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: String,
    config: serde_json::Value,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel() as u64,
            });
            offset += 8 * t.numel() as u64;
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Integrity("missing checkpoint magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Integrity(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::Incompatible(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                version.map_or_else(|| "<missing>".to_string(), |v| v.to_string())
            )));
        }
        let header: Header =
            serde_json::from_value(raw).map_err(|e| Error::Integrity(format!("malformed header: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
        let mut tensors = IndexMap::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if numel as u64 != e.len {
                return Err(Error::Integrity(format!(
                    "tensor `{}` has shape {:?} but length {}",
                    e.name, e.shape, e.len
                )));
            }
            let end = e.len.checked_mul(8).and_then(|n| n.checked_add(e.offset));
            let end = match end {
                Some(end) if end <= payload.len() as u64 && e.offset % 8 == 0 => end,
                _ => {
                    return Err(Error::Integrity(format!(
                        "tensor `{}` (offset {}, {} values) lies outside the {}-byte payload",
                        e.name,
                        e.offset,
                        e.len,
                        payload.len()
                    )))
                }
            };
            spans.push((e.offset, end, &e.name));
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
                return Err(Error::Integrity(format!("duplicate tensor `{}`", e.name)));
            }
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Integrity(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
            }
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        Error::Incompatible(m) => Error::Incompatible(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = IndexMap::new();
        tensors.insert("a".into(), Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        tensors.insert("s".into(), Tensor::scalar(std::f64::consts::PI));
        Checkpoint {
            kind: "test".into(),
            config: serde_json::json!({"x": 1}),
            meta: serde_json::json!({}),
            tensors,
        }
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.kind, c.kind);
        for (k, t) in &c.tensors {
            assert!(back.tensors[k].bitwise_eq(t));
        }
    }

    #[test]
    fn truncated_payload_is_integrity_error() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Integrity(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Integrity(_))));
    }

    #[test]
    fn edited_version_is_incompatible() {
        let bytes = sample().to_bytes().unwrap();
        let key = b"\"format_version\":1";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        let mut edited = bytes.clone();
        edited[at + "\"format_version\":".len()] = b'7';
        assert!(matches!(Checkpoint::from_bytes(&edited), Err(Error::Incompatible(_))));
    }
}
