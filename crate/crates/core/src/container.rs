//! Versioned named-array container.
//!
//! The on-disk format behind checkpoints and embedding caches: a magic
//! tag and version, a UTF-8 metadata blob (the resolved config), a
//! manifest of named arrays (name, dtype, shape, byte offset/length) and
//! one contiguous data blob. Everything is little-endian. Serialization
//! is deterministic in insertion order, so save -> load -> save is
//! byte-identical. The reader validates all offsets and sizes against
//! the buffer before allocating, making it safe on untrusted input.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ASSLCONT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64 { dims: Vec<usize>, data: Vec<f64> },
    U64 { dims: Vec<usize>, data: Vec<u64> },
}

impl ArrayData {
    fn dtype_code(&self) -> u8 {
        match self {
            ArrayData::F64 { .. } => 0,
            ArrayData::U64 { .. } => 1,
        }
    }

    fn dims(&self) -> &[usize] {
        match self {
            ArrayData::F64 { dims, .. } | ArrayData::U64 { dims, .. } => dims,
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            ArrayData::F64 { data, .. } => data.len() * 8,
            ArrayData::U64 { data, .. } => data.len() * 8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: String,
    entries: Vec<(String, ArrayData)>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| err("truncated container"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    /// A length that must still fit in the remaining buffer.
    fn bounded_len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        let v = usize::try_from(v).map_err(|_| err("length overflows usize"))?;
        if v > self.buf.len() - self.pos {
            return Err(err(format!("declared length {v} exceeds remaining bytes")));
        }
        Ok(v)
    }
}

impl Container {
    pub fn new(meta: impl Into<String>) -> Self {
        Container {
            meta: meta.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, data: ArrayData) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(err(format!("duplicate entry `{name}`")));
        }
        let expected: usize = data
            .dims()
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| err("dimension overflow"))?;
        let actual = data.byte_len() / 8;
        if expected != actual {
            return Err(err(format!(
                "entry `{name}`: dims {:?} imply {expected} elements, got {actual}",
                data.dims()
            )));
        }
        self.entries.push((name, data));
        Ok(())
    }

    pub fn push_array2(&mut self, name: impl Into<String>, a: &Array2<f64>) -> Result<()> {
        self.push(
            name,
            ArrayData::F64 {
                dims: vec![a.nrows(), a.ncols()],
                data: a.iter().copied().collect(),
            },
        )
    }

    pub fn push_scalar_f64(&mut self, name: impl Into<String>, v: f64) -> Result<()> {
        self.push(
            name,
            ArrayData::F64 {
                dims: vec![1],
                data: vec![v],
            },
        )
    }

    pub fn push_scalar_u64(&mut self, name: impl Into<String>, v: u64) -> Result<()> {
        self.push(
            name,
            ArrayData::U64 {
                dims: vec![1],
                data: vec![v],
            },
        )
    }

    pub fn get(&self, name: &str) -> Option<&ArrayData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_array2(&self, name: &str) -> Result<Array2<f64>> {
        match self.get(name) {
            Some(ArrayData::F64 { dims, data }) if dims.len() == 2 => {
                Array2::from_shape_vec((dims[0], dims[1]), data.clone())
                    .map_err(|e| err(format!("entry `{name}`: {e}")))
            }
            Some(_) => Err(err(format!("entry `{name}` is not a 2-d f64 array"))),
            None => Err(err(format!("missing entry `{name}`"))),
        }
    }

    pub fn get_scalar_f64(&self, name: &str) -> Result<f64> {
        match self.get(name) {
            Some(ArrayData::F64 { data, .. }) if data.len() == 1 => Ok(data[0]),
            Some(_) => Err(err(format!("entry `{name}` is not a scalar f64"))),
            None => Err(err(format!("missing entry `{name}`"))),
        }
    }

    pub fn get_scalar_u64(&self, name: &str) -> Result<u64> {
        match self.get(name) {
            Some(ArrayData::U64 { data, .. }) if data.len() == 1 => Ok(data[0]),
            Some(_) => Err(err(format!("entry `{name}` is not a scalar u64"))),
            None => Err(err(format!("missing entry `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());

        let mut offset = 0u64;
        for (name, data) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(data.dtype_code());
            out.push(data.dims().len() as u8);
            for &d in data.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(data.byte_len() as u64).to_le_bytes());
            offset += data.byte_len() as u64;
        }

        out.extend_from_slice(&offset.to_le_bytes());
        for (_, data) in &self.entries {
            match data {
                ArrayData::F64 { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                ArrayData::U64 { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(err("bad magic"));
        }
        let version = c.u32()?;
        if version != FORMAT_VERSION {
            return Err(err(format!(
                "unsupported container version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let meta_len = c.bounded_len()?;
        let meta = std::str::from_utf8(c.take(meta_len)?)
            .map_err(|_| err("metadata is not UTF-8"))?
            .to_string();

        let n_entries = c.u64()?;
        // Each manifest entry needs at least 26 bytes; cap up front so a
        // hostile count cannot force a huge allocation.
        if n_entries > (bytes.len() as u64) / 26 {
            return Err(err("entry count exceeds file size"));
        }
        let mut manifest = Vec::with_capacity(n_entries as usize);
        for _ in 0..n_entries {
            let name_len = c.bounded_len()?;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|_| err("entry name is not UTF-8"))?
                .to_string();
            let dtype = c.u8()?;
            let ndim = c.u8()? as usize;
            if ndim > 8 {
                return Err(err(format!("entry `{name}`: {ndim} dimensions")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(
                    usize::try_from(c.u64()?).map_err(|_| err("dimension overflows usize"))?,
                );
            }
            let offset = c.u64()?;
            let byte_len = c.u64()?;
            manifest.push((name, dtype, dims, offset, byte_len));
        }

        let blob_len = c.bounded_len()?;
        let blob = c.take(blob_len)?;

        let mut container = Container::new(meta);
        for (name, dtype, dims, offset, byte_len) in manifest {
            let offset = usize::try_from(offset).map_err(|_| err("offset overflows usize"))?;
            let byte_len =
                usize::try_from(byte_len).map_err(|_| err("length overflows usize"))?;
            let end = offset
                .checked_add(byte_len)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| err(format!("entry `{name}` outside data blob")))?;
            if byte_len % 8 != 0 {
                return Err(err(format!("entry `{name}`: unaligned byte length")));
            }
            let n_elems = byte_len / 8;
            let expected: usize = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| err("dimension overflow"))?;
            if expected != n_elems {
                return Err(err(format!(
                    "entry `{name}`: dims {dims:?} imply {expected} elements, blob holds {n_elems}"
                )));
            }
            let raw = &blob[offset..end];
            let data = match dtype {
                0 => ArrayData::F64 {
                    dims,
                    data: raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                },
                1 => ArrayData::U64 {
                    dims,
                    data: raw
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                },
                d => return Err(err(format!("entry `{name}`: unknown dtype {d}"))),
            };
            container.push(name, data)?;
        }
        Ok(container)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| err(format!("{}: {e}", path.display())))
    }
}
