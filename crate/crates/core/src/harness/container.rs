//! Tensor container: `BATL`, a u32 LE version, a u64 LE header length, a
//! JSON header, raw little-endian f32 payloads in entry order, and a
//! SHA-256 of everything before it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"BATL";
pub const VERSION: u32 = 1;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryHeader {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    entries: Vec<EntryHeader>,
    meta: serde_json::Value,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn container_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Container {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        let i = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(i).1)
    }

    /// Values are stored as f32; anything else is rounded on the way out.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("container entry `{name}`")));
            }
            let offset = payload.len() as u64;
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            entries.push(EntryHeader {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            entries,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len() + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(container_err(path, "not a BATL container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(container_err(path, format!("unsupported version {version}, expected {VERSION}")));
        }
        let body = bytes.len().checked_sub(DIGEST).filter(|&b| b >= 16).ok_or_else(|| Error::Checksum(path.to_path_buf()))?;
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            return Err(Error::Checksum(path.to_path_buf()));
        }
        let bytes = &bytes[..body];
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| container_err(path, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..end]).map_err(|e| container_err(path, format!("bad header: {e}")))?;
        let payload = &bytes[end..];
        let mut tensors = Vec::with_capacity(header.entries.len());
        let mut cursor = 0u64;
        for e in header.entries {
            let numel: usize = e.shape.iter().product();
            if e.dtype != "f32" || e.nbytes != 4 * numel as u64 || e.offset != cursor {
                return Err(container_err(path, format!("inconsistent entry `{}`", e.name)));
            }
            let (a, b) = (e.offset as usize, (e.offset + e.nbytes) as usize);
            if b > payload.len() {
                return Err(container_err(path, format!("entry `{}` overruns the payload", e.name)));
            }
            let data = payload[a..b]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
            cursor = e.offset + e.nbytes;
        }
        if cursor != payload.len() as u64 {
            return Err(container_err(path, "trailing bytes after the last entry"));
        }
        Ok(Container {
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a temporary sibling and renames, so readers never see a partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
