//! Atomic file output and the tensor container format.
//!
//! A container is
//!
//! ```text
//! magic "IBPCONT1" | u64 LE manifest length | manifest (JSON) | data
//! ```
//!
//! The manifest lists every tensor with its name, shape, dtype, byte offset
//! into the data section and byte length; the data section holds
//! little-endian IEEE-754 values in manifest order. Free-form metadata rides
//! along in the manifest's `meta` field.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"IBPCONT1";
pub const FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to a temporary sibling of `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::arg(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory container contents.
#[derive(Clone, Debug)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    entries: Vec<TensorEntry>,
    data: Vec<u8>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            entries: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let offset = self.data.len() as u64;
        for &v in t.data() {
            v.write_le(&mut self.data);
        }
        self.entries.push(TensorEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset,
            length: self.data.len() as u64 - offset,
        });
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    /// Decodes tensor `name`, converting to `T` if it was stored in the other
    /// precision.
    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        let bytes = &self.data[e.offset as usize..(e.offset + e.length) as usize];
        match e.dtype {
            DType::F32 => decode::<f32>(bytes, &e.shape).map(|t| t.cast()),
            DType::F64 => decode::<f64>(bytes, &e.shape).map(|t| t.cast()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.entries.clone(),
        };
        let text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + text.len() + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    /// Parses and fully validates a container; nothing is returned unless
    /// every entry lies inside the data section.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a container file (bad magic bytes)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(bad(format!("truncated manifest: {len} bytes declared, {} present", body.len())));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("unreadable manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let data = &body[len..];
        let mut expected_offset = 0u64;
        for e in &manifest.tensors {
            let count: usize = e.shape.iter().product();
            let want = (count * e.dtype.size_of()) as u64;
            if e.length != want || e.offset != expected_offset {
                return Err(bad(format!("inconsistent directory entry for `{}`", e.name)));
            }
            expected_offset += e.length;
        }
        if data.len() as u64 != expected_offset {
            return Err(bad(format!(
                "data section has {} bytes, directory describes {expected_offset}",
                data.len()
            )));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            entries: manifest.tensors,
            data: data.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn decode<T: Real>(bytes: &[u8], shape: &[usize]) -> Result<Tensor<T>> {
    let data = bytes.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
    Tensor::new(shape.to_vec(), data)
}
