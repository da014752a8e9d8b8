//! Versioned little-endian binary container used for templates and checkpoints.
//!
//! Layout:
//!
//! ```text
//! offset 0   magic      4 bytes  "MAVB"
//! offset 4   version    u32 LE   (currently 1)
//! offset 8   header_len u64 LE
//! offset 16  header     header_len bytes of UTF-8 JSON
//!            padding    zero bytes up to the next multiple of 8
//!            data       raw arrays, each starting on an 8-byte boundary
//! ```
//!
//! The JSON header is `{"kind": .., "meta": {..}, "arrays": [{"name", "dtype",
//! "shape", "offset", "nbytes"}]}` with `offset` relative to the data section.
//! Supported dtypes are `f64`, `u32` and `i64`, always little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MAVB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U32(Vec<u32>),
    I64(Vec<i64>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::U32(_) => "u32",
            ArrayData::I64(_) => "i64",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
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
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    arrays: Vec<(String, Array)>,
}

fn pad8(n: usize) -> usize {
    (8 - n % 8) % 8
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: ArrayData) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "array '{name}': shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if self.arrays.iter().any(|(n, _)| n == name) {
            return Err(Error::Format(format!("duplicate array '{name}'")));
        }
        self.arrays.push((name.to_string(), Array { shape, data }));
        Ok(())
    }

    pub fn push_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        self.push(name, shape, ArrayData::F64(data))
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Format(format!("missing array '{name}'")))
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F64(v) => Ok((&a.shape, v)),
            other => Err(Error::Format(format!(
                "array '{name}' has dtype {}, expected f64",
                other.dtype()
            ))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<(&[usize], &[u32])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::U32(v) => Ok((&a.shape, v)),
            other => Err(Error::Format(format!(
                "array '{name}' has dtype {}, expected u32",
                other.dtype()
            ))),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<(&[usize], &[i64])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::I64(v) => Ok((&a.shape, v)),
            other => Err(Error::Format(format!(
                "array '{name}' has dtype {}, expected i64",
                other.dtype()
            ))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, array) in &self.arrays {
            let offset = data.len();
            array.data.write_le(&mut data);
            let nbytes = data.len() - offset;
            data.resize(data.len() + pad8(data.len()), 0);
            entries.push(ArrayEntry {
                name: name.clone(),
                dtype: array.data.dtype().to_string(),
                shape: array.shape.clone(),
                offset: offset as u64,
                nbytes: nbytes as u64,
            });
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: entries,
        })?;

        let mut out = Vec::with_capacity(16 + header.len() + 8 + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(out.len() + pad8(out.len()), 0);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let data_start = header_end + pad8(header_end);
        let data = bytes.get(data_start..).unwrap_or(&[]);

        let mut container = Container::new(header.kind, header.meta);
        for e in header.arrays {
            let start = e.offset as usize;
            let end = start
                .checked_add(e.nbytes as usize)
                .filter(|&end| end <= data.len())
                .ok_or_else(|| Error::Format(format!("array '{}' out of bounds", e.name)))?;
            let raw = &data[start..end];
            let parsed = match e.dtype.as_str() {
                "f64" => ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                "u32" => ArrayData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                "i64" => ArrayData::I64(
                    raw.chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(Error::Format(format!("unknown dtype '{other}'"))),
            };
            container.push(&e.name, e.shape, parsed)?;
        }
        Ok(container)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_shape_mismatch() {
        let mut c = Container::new("t", serde_json::json!({}));
        assert!(c.push_f64("a", vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let c = Container::new("t", serde_json::json!({"x": 1}));
        let mut bytes = c.to_bytes().unwrap();
        bytes[4] = 9;
        assert!(Container::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes).is_err());
    }

    #[test]
    fn layout_is_aligned() {
        let mut c = Container::new("t", serde_json::json!({"k": "abc"}));
        c.push("faces", vec![3], ArrayData::U32(vec![1, 2, 3])).unwrap();
        c.push_f64("v", vec![1], vec![0.5]).unwrap();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(bytes.len() % 8, 0);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            floats in proptest::collection::vec(proptest::num::f64::ANY, 0..40),
            ints in proptest::collection::vec(any::<u32>(), 0..17),
            longs in proptest::collection::vec(any::<i64>(), 0..5),
        ) {
            let mut c = Container::new("checkpoint", serde_json::json!({"epoch": 3}));
            c.push_f64("f", vec![floats.len()], floats.clone()).unwrap();
            c.push("u", vec![ints.len()], ArrayData::U32(ints.clone())).unwrap();
            c.push("l", vec![longs.len(), 1], ArrayData::I64(longs.clone())).unwrap();
            let bytes = c.to_bytes().unwrap();
            let back = Container::from_bytes(&bytes).unwrap();
            let (_, f) = back.f64s("f").unwrap();
            prop_assert!(f.iter().zip(&floats).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.u32s("u").unwrap().1, &ints[..]);
            prop_assert_eq!(back.i64s("l").unwrap().1, &longs[..]);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
