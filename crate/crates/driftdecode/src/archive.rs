//! Named-tensor archive: the on-disk format for extractor weights and
//! checkpoint parameters.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "NTA1"
//! count   u32      number of entries
//! entry*  repeated count times:
//!   name_len u16
//!   name     name_len bytes of UTF-8
//!   dtype    u8   0 = f32, 1 = f64
//!   ndim     u8
//!   dims     ndim x u64
//!   data     prod(dims) * sizeof(dtype) bytes, little-endian scalars
//! ```
//!
//! Readers must tolerate arbitrary bytes: every length is validated against
//! the remaining input before any allocation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Elem, Tensor};

pub const MAGIC: &[u8; 4] = b"NTA1";

/// Hard cap on a single tensor's element count; rejects absurd headers.
const MAX_ELEMS: u64 = 1 << 31;

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    /// View as `Tensor<T>`, converting between float widths if necessary.
    pub fn to_tensor<T: Elem>(&self) -> Tensor<T> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        }
    }
}

/// In-memory archive: an ordered name -> tensor map.
#[derive(Debug, Default, Clone)]
pub struct Archive {
    entries: BTreeMap<String, TensorData>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn insert<T: Elem>(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let data = match T::DTYPE {
            Dtype::F32 => TensorData::F32(tensor.cast()),
            Dtype::F64 => TensorData::F64(tensor.cast()),
        };
        self.entries.insert(name.into(), data);
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fetch a tensor by name, converting to `T` and checking the shape.
    pub fn tensor<T: Elem>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::LayerNotFound(name.to_string()))?;
        if entry.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: expected shape {:?}, archive has {:?}",
                shape,
                entry.shape()
            )));
        }
        Ok(entry.to_tensor())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut buf4 = [0u8; 4];
        LittleEndian::write_u32(&mut buf4, self.entries.len() as u32);
        out.extend_from_slice(&buf4);
        for (name, data) in &self.entries {
            let nb = name.as_bytes();
            let mut buf2 = [0u8; 2];
            LittleEndian::write_u16(&mut buf2, nb.len() as u16);
            out.extend_from_slice(&buf2);
            out.extend_from_slice(nb);
            out.push(data.dtype().code());
            let shape = data.shape();
            out.push(shape.len() as u8);
            let mut buf8 = [0u8; 8];
            for &d in shape {
                LittleEndian::write_u64(&mut buf8, d as u64);
                out.extend_from_slice(&buf8);
            }
            match data {
                TensorData::F32(t) => {
                    for &v in t.data() {
                        LittleEndian::write_f32(&mut buf4, v);
                        out.extend_from_slice(&buf4);
                    }
                }
                TensorData::F64(t) => {
                    for &v in t.data() {
                        LittleEndian::write_f64(&mut buf8, v);
                        out.extend_from_slice(&buf8);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
        }
        let count = r.u32("entry count")?;
        let mut entries = BTreeMap::new();
        for i in 0..count {
            let at = r.pos as u64;
            let name_len = r.u16("name length")? as usize;
            let name_bytes = r.take(name_len, "name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::format(at, format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let dtype_code = r.u8("dtype")?;
            let dtype = Dtype::from_code(dtype_code)
                .ok_or_else(|| Error::format(at, format!("entry {name}: unknown dtype {dtype_code}")))?;
            let ndim = r.u8("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: u64 = 1;
            for _ in 0..ndim {
                let d = r.u64("dim")?;
                numel = numel
                    .checked_mul(d)
                    .filter(|&n| n <= MAX_ELEMS)
                    .ok_or_else(|| Error::format(at, format!("entry {name}: element count overflow")))?;
                shape.push(d as usize);
            }
            let want = (numel as usize)
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::format(at, format!("entry {name}: byte count overflow")))?;
            let raw = r.take(want, "tensor data")?;
            let data = match dtype {
                Dtype::F32 => {
                    let v: Vec<f32> = raw.chunks_exact(4).map(LittleEndian::read_f32).collect();
                    TensorData::F32(Tensor::from_vec(shape, v))
                }
                Dtype::F64 => {
                    let v: Vec<f64> = raw.chunks_exact(8).map(LittleEndian::read_f64).collect();
                    TensorData::F64(Tensor::from_vec(shape, v))
                }
            };
            if entries.insert(name.clone(), data).is_some() {
                return Err(Error::format(at, format!("duplicate entry {name}")));
            }
        }
        Ok(Archive { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, have {}", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2, what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }
}
