//! Neutral array container shared by fold archives, signal records and
//! checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "PULSEARC"
//! offset 8   u64       manifest length L
//! offset 16  L bytes   UTF-8 JSON manifest
//!            0..7      zero padding up to an 8-byte boundary
//! data       ...       raw arrays, each at `offset` bytes from the data start
//! ```
//!
//! The manifest is
//! `{"format": "<kind>/<version>", "meta": {..}, "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}]}`
//! with `dtype` one of `"f32"` or `"i32"`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};

pub const MAGIC: &[u8; 8] = b"PULSEARC";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::I32(_) => "i32",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(name: &str, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.to_string(),
            shape,
            data: ArrayData::F32(data),
        }
    }

    pub fn i32(name: &str, shape: Vec<usize>, data: Vec<i32>) -> Self {
        Self {
            name: name.to_string(),
            shape,
            data: ArrayData::I32(data),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub format: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(format: &str, meta: serde_json::Value) -> Self {
        Self {
            format: format.to_string(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, a: NamedArray) {
        self.arrays.push(a);
    }

    pub fn take(&mut self, name: &str) -> Result<NamedArray> {
        let pos = self
            .arrays
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| PulseError::MissingArray(name.to_string()))?;
        Ok(self.arrays.remove(pos))
    }

    pub fn take_f32(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let a = self.take(name)?;
        match a.data {
            ArrayData::F32(v) => Ok((a.shape, v)),
            ArrayData::I32(_) => Err(PulseError::Format(format!("array `{name}` is not f32"))),
        }
    }

    pub fn take_i32(&mut self, name: &str) -> Result<(Vec<usize>, Vec<i32>)> {
        let a = self.take(name)?;
        match a.data {
            ArrayData::I32(v) => Ok((a.shape, v)),
            ArrayData::F32(_) => Err(PulseError::Format(format!("array `{name}` is not i32"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for a in &self.arrays {
            let numel: usize = a.shape.iter().product();
            if numel != a.data.len() {
                return Err(PulseError::Shape(format!(
                    "array `{}` shape {:?} holds {} values",
                    a.name,
                    a.shape,
                    a.data.len()
                )));
            }
            let nbytes = 4 * numel as u64;
            entries.push(ArrayEntry {
                name: a.name.clone(),
                dtype: a.data.dtype().to_string(),
                shape: a.shape.clone(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let manifest = serde_json::to_vec(&Manifest {
            format: self.format.clone(),
            meta: self.meta.clone(),
            arrays: entries,
        })?;
        let mut out = Vec::with_capacity(32 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        while out.len() % 8 != 0 {
            out.push(0);
        }
        for a in &self.arrays {
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], expected_format: &str) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(PulseError::Format("bad magic bytes".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mend = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| PulseError::Format("manifest runs past end of file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..mend])?;
        if manifest.format != expected_format {
            return Err(PulseError::Version {
                expected: expected_format.to_string(),
                found: manifest.format,
            });
        }
        let data_start = mend.div_ceil(8) * 8;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in manifest.arrays {
            let numel: usize = e.shape.iter().product();
            if e.nbytes != 4 * numel as u64 {
                return Err(PulseError::Shape(format!(
                    "array `{}` shape {:?} disagrees with {} bytes",
                    e.name, e.shape, e.nbytes
                )));
            }
            let start = data_start as u64 + e.offset;
            let end = start + e.nbytes;
            if end > bytes.len() as u64 {
                return Err(PulseError::Format(format!("array `{}` truncated", e.name)));
            }
            let raw = &bytes[start as usize..end as usize];
            let words = raw.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
            let data = match e.dtype.as_str() {
                "f32" => ArrayData::F32(words.map(f32::from_le_bytes).collect()),
                "i32" => ArrayData::I32(words.map(i32::from_le_bytes).collect()),
                other => return Err(PulseError::Format(format!("unknown dtype `{other}`"))),
            };
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            format: manifest.format,
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn read(path: &Path, expected_format: &str) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, expected_format)
    }
}
