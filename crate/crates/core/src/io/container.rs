//! Named-array binary container shared by the grid cache and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RSGRID1"                       7-byte magic
//! u32                             array count
//! per array:
//!   u16 name length, name bytes   UTF-8
//!   u8  dtype                     1 = f64, 2 = u8
//!   u8  ndim, u64 × ndim          shape
//!   data                          row-major, little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"RSGRID1";

const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Tensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

/// Arrays in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedArrays {
    entries: Vec<(String, ArrayData)>,
}

impl NamedArrays {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace.
    pub fn insert(&mut self, name: impl Into<String>, data: ArrayData) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = data,
            None => self.entries.push((name, data)),
        }
    }

    pub fn insert_text(&mut self, name: impl Into<String>, text: &str) {
        let bytes = text.as_bytes().to_vec();
        self.insert(
            name,
            ArrayData::U8 {
                shape: vec![bytes.len()],
                data: bytes,
            },
        );
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

    pub fn f64(&self, name: &str, path: &Path) -> Result<&Tensor> {
        match self.get(name) {
            Some(ArrayData::F64(t)) => Ok(t),
            Some(_) => Err(Error::format(path, format!("array `{name}` is not f64"))),
            None => Err(Error::format(path, format!("missing array `{name}`"))),
        }
    }

    pub fn u8(&self, name: &str, path: &Path) -> Result<(&[usize], &[u8])> {
        match self.get(name) {
            Some(ArrayData::U8 { shape, data }) => Ok((shape, data)),
            Some(_) => Err(Error::format(path, format!("array `{name}` is not u8"))),
            None => Err(Error::format(path, format!("missing array `{name}`"))),
        }
    }

    pub fn text(&self, name: &str, path: &Path) -> Result<String> {
        let (_, data) = self.u8(name, path)?;
        String::from_utf8(data.to_vec()).map_err(|_| Error::format(path, format!("array `{name}` is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, data) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (dtype, shape) = match data {
                ArrayData::F64(t) => (DTYPE_F64, t.shape()),
                ArrayData::U8 { shape, .. } => (DTYPE_U8, shape.as_slice()),
            };
            out.push(dtype);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match data {
                ArrayData::F64(t) => {
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                ArrayData::U8 { data, .. } => out.extend_from_slice(data),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = bytes;
        let fail = |m: &str| Error::format(path, m.to_string());
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(|_| fail("truncated header"))?;
        if &magic != MAGIC {
            return Err(fail("bad magic"));
        }
        let count = read_u32(&mut r).ok_or_else(|| fail("truncated header"))?;
        let mut arrays = NamedArrays::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r).ok_or_else(|| fail("truncated name"))? as usize;
            let name = take(&mut r, name_len).ok_or_else(|| fail("truncated name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| fail("name is not UTF-8"))?;
            let dtype = take(&mut r, 1).ok_or_else(|| fail("truncated dtype"))?[0];
            let ndim = take(&mut r, 1).ok_or_else(|| fail("truncated shape"))?[0] as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| fail("truncated shape"))?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                DTYPE_F64 => {
                    let raw = take(&mut r, n * 8).ok_or_else(|| fail("truncated f64 data"))?;
                    let vals = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    ArrayData::F64(Tensor::from_vec(&shape, vals))
                }
                DTYPE_U8 => {
                    let raw = take(&mut r, n).ok_or_else(|| fail("truncated u8 data"))?;
                    ArrayData::U8 {
                        shape,
                        data: raw.to_vec(),
                    }
                }
                other => return Err(fail(&format!("unknown dtype {other}"))),
            };
            arrays.insert(name, data);
        }
        if !r.is_empty() {
            return Err(fail("trailing bytes"));
        }
        Ok(arrays)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Option<&'a [u8]> {
    if r.len() < n {
        return None;
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Some(head)
}

fn read_u16(r: &mut &[u8]) -> Option<u16> {
    take(r, 2).map(|b| u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    take(r, 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(r: &mut &[u8]) -> Option<u64> {
    take(r, 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}
