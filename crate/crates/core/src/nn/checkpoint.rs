//! Self-describing checkpoint archive.
//!
//! Layout: 8-byte magic, little-endian `u32` version, little-endian `u64`
//! header length, UTF-8 JSON header, then every array as little-endian
//! `f32` in header order. Bytes are written from bit patterns so a
//! load/save cycle reproduces the file exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::param::Module;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CMBCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    config_hash: String,
    entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub arrays: Vec<NamedArray>,
}

/// SHA-256 over the canonical (key-sorted) JSON encoding of a config.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    let bytes = serde_json::to_vec(&value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl Checkpoint {
    /// Snapshot every parameter and buffer of `model`.
    pub fn capture<C: Serialize>(kind: &str, config: &C, model: &mut dyn Module) -> Result<Self> {
        let mut arrays = Vec::new();
        model.visit_params(&mut |p| {
            arrays.push(NamedArray {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.value.clone(),
            })
        });
        model.visit_buffers(&mut |b| {
            arrays.push(NamedArray {
                name: b.name.clone(),
                shape: vec![b.value.len()],
                data: b.value.clone(),
            })
        });
        Ok(Self {
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            config_hash: config_hash(config)?,
            arrays,
        })
    }

    /// Copies stored arrays into `model`, matching by name and shape.
    pub fn restore(&self, model: &mut dyn Module) -> Result<()> {
        let find = |name: &str| self.arrays.iter().find(|a| a.name == name);
        let mut err = None;
        model.visit_params(&mut |p| {
            match find(&p.name) {
                Some(a) if a.shape == p.shape => p.value.copy_from_slice(&a.data),
                Some(a) => {
                    err.get_or_insert(format!("{}: shape {:?} != {:?}", p.name, a.shape, p.shape));
                }
                None => {
                    err.get_or_insert(format!("missing parameter {}", p.name));
                }
            };
        });
        model.visit_buffers(&mut |b| match find(&b.name) {
            Some(a) if a.data.len() == b.value.len() => b.value.copy_from_slice(&a.data),
            _ => {
                err.get_or_insert(format!("missing or mismatched buffer {}", b.name));
            }
        });
        match err {
            Some(e) => Err(Error::Checkpoint(e)),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            entries: self
                .arrays
                .iter()
                .map(|a| Entry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.arrays.iter().map(|a| a.data.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 20 + hlen;
        let mut arrays = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated payload"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            pos += 4 * n;
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            config_hash: header.config_hash,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Deserialises the embedded config and checks it against the stored hash.
    pub fn config<T: serde::de::DeserializeOwned + Serialize>(&self, expected_kind: &str) -> Result<T> {
        if self.kind != expected_kind {
            return Err(Error::Checkpoint(format!(
                "expected a {expected_kind} checkpoint, found {}",
                self.kind
            )));
        }
        let cfg: T = serde_json::from_value(self.config.clone())?;
        if config_hash(&cfg)? != self.config_hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        Ok(cfg)
    }
}
