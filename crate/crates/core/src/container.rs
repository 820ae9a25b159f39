//! Header-plus-blob container used for datasets and model checkpoints.
//!
//! Layout:
//!
//! ```text
//! DELAYLAB-CONTAINER 1\n
//! <header byte length, decimal>\n
//! <JSON header>\n
//! <array blocks, raw little-endian f64, in header order>
//! ```
//!
//! The header carries the container kind, a free-form metadata object
//! (config echo and so on) and, per array, its name, dtype tag, shape and
//! byte offset into the blob section. JSON object keys are sorted, so equal
//! contents always serialize to equal bytes.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &str = "DELAYLAB-CONTAINER";
pub const FORMAT_VERSION: &str = "1";
const DTYPE_F64_LE: &str = "f64le";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed container: {0}")]
    Format(String),
    #[error("header json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing array `{0}`")]
    MissingArray(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: String,
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayBlock>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(ArrayBlock { name: name.into(), shape, data });
    }

    pub fn array(&self, name: &str) -> Result<&ArrayBlock, ContainerError> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| ContainerError::MissingArray(name.to_string()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ContainerError> {
        let mut offset = 0u64;
        let arrays = self
            .arrays
            .iter()
            .map(|a| {
                let nbytes = (a.data.len() * 8) as u64;
                let e = ArrayEntry {
                    name: a.name.clone(),
                    dtype: DTYPE_F64_LE.into(),
                    shape: a.shape.clone(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect();
        let header = Header {
            version: FORMAT_VERSION.into(),
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays,
        };
        let json = serde_json::to_string_pretty(&header)?;
        write!(w, "{MAGIC} {FORMAT_VERSION}\n{}\n{json}\n", json.len())?;
        let mut buf = Vec::with_capacity(offset as usize);
        for a in &self.arrays {
            for v in &a.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ContainerError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let (magic_line, rest) = split_line(bytes)?;
        let expected = format!("{MAGIC} {FORMAT_VERSION}");
        if magic_line != expected.as_bytes() {
            return Err(ContainerError::Format(format!(
                "bad magic line {:?}",
                String::from_utf8_lossy(magic_line)
            )));
        }
        let (len_line, rest) = split_line(rest)?;
        let header_len: usize = std::str::from_utf8(len_line)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ContainerError::Format("bad header length".into()))?;
        if rest.len() < header_len + 1 || rest[header_len] != b'\n' {
            return Err(ContainerError::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])?;
        if header.version != FORMAT_VERSION {
            return Err(ContainerError::Format(format!("unsupported version {}", header.version)));
        }
        let blob = &rest[header_len + 1..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            if e.dtype != DTYPE_F64_LE {
                return Err(ContainerError::Format(format!("unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.nbytes != (n * 8) as u64 {
                return Err(ContainerError::Format(format!("array {} size mismatch", e.name)));
            }
            let start = e.offset as usize;
            let end = start + e.nbytes as usize;
            let raw = blob
                .get(start..end)
                .ok_or_else(|| ContainerError::Format(format!("array {} out of bounds", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push(ArrayBlock { name: e.name, shape: e.shape, data });
        }
        Ok(Self { kind: header.kind, meta: header.meta, arrays })
    }

    /// Write atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        write_atomic(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Only the header, for `inspect`-style summaries.
    pub fn summary(&self) -> BTreeMap<String, Vec<usize>> {
        self.arrays.iter().map(|a| (a.name.clone(), a.shape.clone())).collect()
    }
}

fn split_line(bytes: &[u8]) -> Result<(&[u8], &[u8]), ContainerError> {
    let pos = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ContainerError::Format("missing newline".into()))?;
    Ok((&bytes[..pos], &bytes[pos + 1..]))
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
