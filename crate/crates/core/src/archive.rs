//! Single-file tensor archive used for checkpoints and loss-network weights.
//!
//! Layout: the 8-byte magic `VADARCH1`, a little-endian `u64` header length,
//! a JSON header, then the raw little-endian tensor payloads back to back.
//! The header carries free-form metadata (for example the network
//! configuration) and one `{name, dtype, shape, offset}` record per tensor,
//! in insertion order. Writing is deterministic, so equal contents give
//! byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Real, Tensor};

const MAGIC: &[u8; 8] = b"VADARCH1";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    meta: BTreeMap<String, serde_json::Value>,
    order: Vec<String>,
    entries: BTreeMap<String, Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta<S: Serialize>(&mut self, key: &str, value: &S) -> Result<()> {
        let v = serde_json::to_value(value)
            .map_err(|e| Error::Archive(format!("cannot encode metadata {key}: {e}")))?;
        self.meta.insert(key.to_string(), v);
        Ok(())
    }

    pub fn meta<D: DeserializeOwned>(&self, key: &str) -> Result<D> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Archive(format!("missing metadata {key}")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| Error::Archive(format!("bad metadata {key}: {e}")))
    }

    pub fn has_meta(&self, key: &str) -> bool {
        self.meta.contains_key(key)
    }

    pub fn put<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let name = name.into();
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        if !self.entries.contains_key(&name) {
            self.order.push(name.clone());
        }
        self.entries.insert(
            name,
            Entry {
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                bytes,
            },
        );
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.get(name).map(|e| e.shape.as_slice())
    }

    /// Reads a tensor, widening or narrowing its element type to `T`.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor {name}")))?;
        let data: Vec<T> = match e.dtype {
            Dtype::F32 => e.bytes.chunks_exact(4).map(|b| T::c(f32::read_le(b) as f64)).collect(),
            Dtype::F64 => e.bytes.chunks_exact(8).map(|b| T::c(f64::read_le(b))).collect(),
        };
        Tensor::from_vec(&e.shape, data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut records = Vec::with_capacity(self.order.len());
        for name in &self.order {
            let e = &self.entries[name];
            records.push(Record {
                name: name.clone(),
                dtype: e.dtype,
                shape: e.shape.clone(),
                offset,
            });
            offset += e.bytes.len();
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: records,
        })
        .map_err(|e| Error::Archive(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for name in &self.order {
            out.extend_from_slice(&self.entries[name].bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Archive("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| Error::Archive(format!("bad header: {e}")))?;
        let payload = &bytes[body..];
        let mut archive = Archive {
            meta: header.meta,
            ..Archive::default()
        };
        for r in header.tensors {
            let len = r.shape.iter().product::<usize>() * r.dtype.size();
            let chunk = payload
                .get(r.offset..r.offset + len)
                .ok_or_else(|| Error::Archive(format!("tensor {} runs past the end", r.name)))?;
            if archive.entries.contains_key(&r.name) {
                return Err(Error::Archive(format!("duplicate tensor {}", r.name)));
            }
            archive.order.push(r.name.clone());
            archive.entries.insert(
                r.name,
                Entry {
                    dtype: r.dtype,
                    shape: r.shape,
                    bytes: chunk.to_vec(),
                },
            );
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes)
    }
}
