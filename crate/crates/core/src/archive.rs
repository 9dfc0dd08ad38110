//! Binary container of named arrays plus a JSON header.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "ETAARCH\0"
//! version    u32       1
//! header     u32 length + UTF-8 JSON
//! count      u32       number of arrays
//! array*     u16 name length, name bytes,
//!            u8 dtype (1 = f32, 2 = f64, 3 = u8),
//!            u8 ndim, u32 dims[ndim],
//!            element data
//! trailer    32 bytes  SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ETAARCH\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header: Value,
    pub arrays: Vec<NamedArray>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }
}

impl Archive {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: ArrayData) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array `{name}` shape/data mismatch");
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Float array `name` widened to f64, or a format error naming `path`.
    pub fn float_array(&self, name: &str, path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
        let a = self.get(name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: format!("missing array `{name}`"),
        })?;
        let v = match &a.data {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
            ArrayData::U8(_) => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("array `{name}` is not floating point"),
                })
            }
        };
        Ok((a.shape.clone(), v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("json header");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            let dtype = match a.data {
                ArrayData::F32(_) => 1u8,
                ArrayData::F64(_) => 2,
                ArrayData::U8(_) => 3,
            };
            out.push(dtype);
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U8(v) => out.extend_from_slice(v),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(format("not an archive (bad magic)"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(format("integrity trailer does not match contents"));
        }
        let mut r = Reader {
            buf: body,
            pos: 8,
            path,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported archive version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Value =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| r.err(format!("header json: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| r.err("array name is not utf-8"))?;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = match dtype {
                1 => ArrayData::F32(
                    r.take(n * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => ArrayData::F64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                3 => ArrayData::U8(r.take(n)?.to_vec()),
                other => return Err(r.err(format!("unknown dtype {other} for `{name}`"))),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(r.err("trailing bytes after last array"));
        }
        Ok(Self { header, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_artifact(path)?;
        Self::from_bytes(&bytes, path)
    }
}

/// Reads a file, reporting a missing path as [`Error::MissingArtifact`].
pub fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
            }
        } else {
            Error::io(path, e)
        }
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    proptest! {
        #[test]
        fn byte_round_trip(f in proptest::collection::vec(any::<f32>(), 0..64),
                           d in proptest::collection::vec(any::<f64>(), 0..16),
                           u in proptest::collection::vec(any::<u8>(), 0..32)) {
            let mut a = Archive::new(json!({"k": "v", "n": 3}));
            a.push("f", &[f.len()], ArrayData::F32(f.clone()));
            a.push("d", &[d.len(), 1], ArrayData::F64(d.clone()));
            a.push("u", &[u.len()], ArrayData::U8(u.clone()));
            let bytes = a.to_bytes();
            let b = Archive::from_bytes(&bytes, Path::new("mem")).unwrap();
            // Compare bit patterns so NaN payloads count as equal.
            prop_assert_eq!(b.to_bytes(), bytes);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut a = Archive::new(json!({}));
        a.push("x", &[3], ArrayData::F32(vec![1.0, 2.0, 3.0]));
        let mut bytes = a.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = Archive::from_bytes(&bytes, Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
