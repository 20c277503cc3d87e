//! Named-tensor container files.
//!
//! Layout:
//!
//! ```text
//! [8 bytes]  magic "QFCKPT01"
//! [8 bytes]  little-endian u64 header length H
//! [H bytes]  UTF-8 JSON header
//! [...]      data region of little-endian f32 values
//! ```
//!
//! The header maps each tensor name to `{dtype: "f32", shape, offset,
//! nbytes}` with offsets relative to the start of the data region and
//! aligned to 64 bytes. An optional `__metadata__` entry holds a string-to-
//! string map. The header is padded with spaces so the data region itself
//! starts on a 64-byte boundary. Tensors are written in name order, so equal
//! contents always serialize to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"QFCKPT01";
pub const ALIGN: usize = 64;
const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// In-memory content of a container file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.into(), serde_json::to_value(&self.metadata)?);
        }
        let mut offset = 0usize;
        let mut layout = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            if name == METADATA_KEY {
                return Err(Error::Header(format!("tensor name `{METADATA_KEY}` is reserved")));
            }
            let nbytes = t.len() * 4;
            header.insert(
                name.clone(),
                serde_json::to_value(Entry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset: offset as u64,
                    nbytes: nbytes as u64,
                })?,
            );
            layout.push((offset, t));
            offset = align_up(offset + nbytes);
        }
        let mut json = serde_json::to_vec(&serde_json::Value::Object(header))?;
        let data_start = align_up(16 + json.len());
        json.resize(data_start - 16, b' ');

        let mut out = Vec::with_capacity(data_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (off, t) in layout {
            out.resize(data_start + off, 0);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Header(format!("file is {} bytes, too short", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Header("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Header(format!("header length {hlen} exceeds file")))?;
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[16..data_start])
                .map_err(|e| Error::Header(format!("header is not valid JSON: {e}")))?;
        let data = &bytes[data_start..];
        let mut out = Container::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                out.metadata = serde_json::from_value(value)
                    .map_err(|e| Error::Header(format!("bad metadata: {e}")))?;
                continue;
            }
            let e: Entry = serde_json::from_value(value)
                .map_err(|e| Error::Header(format!("bad entry for `{name}`: {e}")))?;
            if e.dtype != "f32" {
                return Err(Error::Header(format!("`{name}` has dtype {}", e.dtype)));
            }
            let (off, nb) = (e.offset as usize, e.nbytes as usize);
            if off % ALIGN != 0 {
                return Err(Error::Header(format!("`{name}` offset {off} is not aligned")));
            }
            if nb != numel(&e.shape) * 4 {
                return Err(Error::Header(format!(
                    "`{name}` declares {nb} bytes for shape {:?}",
                    e.shape
                )));
            }
            let slice = off
                .checked_add(nb)
                .and_then(|end| data.get(off..end))
                .ok_or_else(|| Error::Header(format!("`{name}` extends past end of file")))?;
            let values = slice
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.shape, values).map_err(|e| Error::Header(e.to_string()))?;
            out.tensors.insert(name, t);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn align_up(v: usize) -> usize {
    v.div_ceil(ALIGN) * ALIGN
}
