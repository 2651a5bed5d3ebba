//! Single-file keyed array container.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"KVARRAY1"
//! version  u32      currently 1
//! meta_len u32      byte length of the UTF-8 metadata blob
//! metadata meta_len bytes (free-form, typically JSON)
//! count    u32      number of entries
//! entry*   u16 name_len, name bytes,
//!          u8 dtype (0 = f64, 1 = i64),
//!          u8 ndim, ndim x u64 dims,
//!          payload (8 bytes per element, row-major)
//! ```
//!
//! Morphable-model files and network checkpoints are both stored in this
//! format; the metadata blob carries the file kind and, for checkpoints,
//! the architecture config.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KVARRAY1";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub enum ArrayData {
    F64(ArrayD<f64>),
    I64(ArrayD<i64>),
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub metadata: String,
    names: Vec<String>,
    entries: HashMap<String, ArrayData>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn insert_f64(&mut self, name: &str, array: ArrayD<f64>) -> Result<()> {
        self.insert(name, ArrayData::F64(array))
    }

    pub fn insert_i64(&mut self, name: &str, array: ArrayD<i64>) -> Result<()> {
        self.insert(name, ArrayData::I64(array))
    }

    fn insert(&mut self, name: &str, data: ArrayData) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Data(format!("duplicate container key `{name}`")));
        }
        self.names.push(name.to_string());
        self.entries.insert(name.to_string(), data);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayData> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Data(format!("container key `{name}` missing")))
    }

    pub fn get_f64(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self.get(name)? {
            ArrayData::F64(a) => Ok(a),
            ArrayData::I64(_) => Err(Error::Data(format!("container key `{name}` is i64, expected f64"))),
        }
    }

    pub fn get_i64(&self, name: &str) -> Result<&ArrayD<i64>> {
        match self.get(name)? {
            ArrayData::I64(a) => Ok(a),
            ArrayData::F64(_) => Err(Error::Data(format!("container key `{name}` is f64, expected i64"))),
        }
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.metadata.as_bytes();
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta);
        buf.extend_from_slice(&(self.names.len() as u32).to_le_bytes());
        for name in &self.names {
            let data = &self.entries[name];
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            match data {
                ArrayData::F64(a) => {
                    buf.push(0u8);
                    write_shape(&mut buf, a.shape());
                    for v in a.iter() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                ArrayData::I64(a) => {
                    buf.push(1u8);
                    write_shape(&mut buf, a.shape());
                    for v in a.iter() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = Cursor { bytes: &bytes, pos: 0 };

        let magic = cursor.take(8)?;
        if magic != MAGIC {
            return Err(Error::Data(format!(
                "not a keyed array container: {}",
                path.display()
            )));
        }
        let version = cursor.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!(
                "unsupported container version {version} (supported: {VERSION})"
            )));
        }
        let meta_len = cursor.u32()? as usize;
        let metadata = String::from_utf8(cursor.take(meta_len)?.to_vec())
            .map_err(|_| Error::Data("container metadata is not valid UTF-8".into()))?;
        let count = cursor.u32()? as usize;

        let mut container = Container {
            metadata,
            ..Default::default()
        };
        for _ in 0..count {
            let name_len = cursor.u16()? as usize;
            let name = String::from_utf8(cursor.take(name_len)?.to_vec())
                .map_err(|_| Error::Data("container entry name is not valid UTF-8".into()))?;
            let dtype = cursor.u8()?;
            let ndim = cursor.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cursor.u64()? as usize);
            }
            let n_elems: usize = dims.iter().product();
            match dtype {
                0 => {
                    let mut data = Vec::with_capacity(n_elems);
                    for _ in 0..n_elems {
                        data.push(f64::from_le_bytes(cursor.take(8)?.try_into().unwrap()));
                    }
                    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                        .map_err(|e| Error::Data(format!("bad shape for `{name}`: {e}")))?;
                    container.insert_f64(&name, arr)?;
                }
                1 => {
                    let mut data = Vec::with_capacity(n_elems);
                    for _ in 0..n_elems {
                        data.push(i64::from_le_bytes(cursor.take(8)?.try_into().unwrap()));
                    }
                    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                        .map_err(|e| Error::Data(format!("bad shape for `{name}`: {e}")))?;
                    container.insert_i64(&name, arr)?;
                }
                other => {
                    return Err(Error::Data(format!(
                        "unknown dtype tag {other} for container key `{name}`"
                    )))
                }
            }
        }
        Ok(container)
    }
}

fn write_shape(buf: &mut Vec<u8>, shape: &[usize]) {
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("truncated container file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
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
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
