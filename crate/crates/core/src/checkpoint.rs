//! Versioned single-file checkpoint container.
//!
//! Layout: magic `USGENCKP`, little-endian `u32` format version, `u64`
//! header length, JSON header, SHA-256 of the header, then the arrays as
//! little-endian `f32` in directory order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::NamedArray;

pub const MAGIC: &[u8; 8] = b"USGENCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Seed and position needed to continue every random stream exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_unit: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub pipeline: String,
    /// Echo of the network configuration; must match on load.
    pub architecture: Value,
    pub config: Value,
    pub epoch: u64,
    pub rng: RngState,
    pub created_unix_s: u64,
    /// Small non-array training state (for example augmentation levels).
    pub aux: Value,
    pub arrays: BTreeMap<String, NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    pipeline: String,
    architecture: Value,
    config: Value,
    epoch: u64,
    rng: RngState,
    created_unix_s: u64,
    #[serde(default)]
    aux: Value,
    arrays: Vec<ArrayEntry>,
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl ModelCheckpoint {
    pub fn new(
        pipeline: &str,
        architecture: Value,
        config: Value,
        epoch: u64,
        rng: RngState,
        arrays: BTreeMap<String, NamedArray>,
    ) -> Self {
        let created_unix_s = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            pipeline: pipeline.to_string(),
            architecture,
            config,
            epoch,
            rng,
            created_unix_s,
            aux: Value::Null,
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, a) in &self.arrays {
            let expected: usize = a.shape.iter().product();
            if expected != a.data.len() {
                return Err(Error::Shape(format!(
                    "array {name} has shape {:?} but {} values",
                    a.shape,
                    a.data.len()
                )));
            }
            let bytes = f32_bytes(&a.data);
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: a.shape.clone(),
                offset: payload.len() as u64,
                len: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
            payload.extend_from_slice(&bytes);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            pipeline: self.pipeline.clone(),
            architecture: self.architecture.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng,
            created_unix_s: self.created_unix_s,
            aux: self.aux.clone(),
            arrays: entries,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(52 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&Sha256::digest(&header));
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            what: "checkpoint",
            path: path.to_path_buf(),
            detail,
        };
        let checksum = |section: &str| Error::Checksum {
            path: path.to_path_buf(),
            section: section.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            if bytes.len() < 20 && MAGIC.starts_with(&bytes[..bytes.len().min(8)]) {
                return Err(checksum("preamble"));
            }
            return Err(fmt("missing USGENCKP magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen.saturating_add(32) {
            return Err(checksum("header"));
        }
        let header_bytes = &body[..hlen];
        if Sha256::digest(header_bytes).as_slice() != &body[hlen..hlen + 32] {
            return Err(checksum("header"));
        }
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| fmt(format!("bad header: {e}")))?;
        let payload = &body[hlen + 32..];
        let total: u64 = header.arrays.iter().map(|a| a.len).sum();
        if payload.len() as u64 != total {
            return Err(checksum("payload length"));
        }
        let mut arrays = BTreeMap::new();
        for entry in header.arrays {
            let end = entry.offset.checked_add(entry.len).filter(|&e| e <= total);
            let Some(end) = end else {
                return Err(fmt(format!("array {} lies outside the payload", entry.name)));
            };
            let raw = &payload[entry.offset as usize..end as usize];
            if hex::encode(Sha256::digest(raw)) != entry.sha256 {
                return Err(checksum(&format!("array {}", entry.name)));
            }
            let expected: usize = entry.shape.iter().product();
            if raw.len() != expected * 4 {
                return Err(fmt(format!("array {} length disagrees with its shape", entry.name)));
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.insert(entry.name, NamedArray { shape: entry.shape, data });
        }
        Ok(Self {
            pipeline: header.pipeline,
            architecture: header.architecture,
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
            created_unix_s: header.created_unix_s,
            aux: header.aux,
            arrays,
        })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Fails with the differing keys when `expected` differs from the
    /// stored architecture.
    pub fn check_architecture(&self, expected: &Value) -> Result<()> {
        let keys = config_diff(&self.architecture, expected);
        if keys.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch { keys })
        }
    }

    pub fn check_pipeline(&self, expected: &str) -> Result<()> {
        if self.pipeline == expected {
            Ok(())
        } else {
            Err(Error::ConfigMismatch {
                keys: vec![format!("pipeline ({} vs {expected})", self.pipeline)],
            })
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Dotted keys whose values differ between two JSON documents.
pub fn config_diff(a: &Value, b: &Value) -> Vec<String> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", a, &mut fa);
    flatten("", b, &mut fb);
    let mut keys: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .cloned()
        .collect();
    keys.sort();
    keys.dedup();
    keys
}
