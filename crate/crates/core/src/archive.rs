//! Named-array container.
//!
//! Layout: the 8-byte magic `TKARCH01`, a little-endian `u64` manifest
//! length, a UTF-8 JSON manifest, then the raw array bytes. The manifest is
//! `{"version", "meta", "entries": [{"name", "dtype", "shape", "offset",
//! "nbytes"}]}` with offsets relative to the start of the data block. Arrays
//! are row-major and little-endian; dtypes are `f64`, `i64` and `u8`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TKARCH01";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            Self::F64(_) => "f64",
            Self::I64(_) => "i64",
            Self::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::F64(v) => v.len(),
            Self::I64(v) => v.len(),
            Self::U8(v) => v.len(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Self::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Self::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Self::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read(dtype: &str, bytes: &[u8]) -> Result<Self> {
        let words = |size: usize| -> Result<std::slice::ChunksExact<'_, u8>> {
            if bytes.len() % size != 0 {
                return Err(Error::Archive(format!("{} bytes is not a whole number of {dtype}", bytes.len())));
            }
            Ok(bytes.chunks_exact(size))
        };
        Ok(match dtype {
            "f64" => Self::F64(words(8)?.map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
            "i64" => Self::I64(words(8)?.map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
            "u8" => Self::U8(bytes.to_vec()),
            other => return Err(Error::Archive(format!("unknown dtype {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

/// Arrays keyed by name (kept in name order) plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    arrays: BTreeMap<String, NamedArray>,
}

impl Default for Archive {
    fn default() -> Self {
        Self::new()
    }
}

impl Archive {
    pub fn new() -> Self {
        Self { meta: serde_json::Value::Object(Default::default()), arrays: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: ArrayData) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Archive(format!("{name}: shape {shape:?} does not hold {} values", data.len())));
        }
        self.arrays.insert(name, NamedArray { shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<()> {
        self.insert(name, shape, ArrayData::F64(data))
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.insert_f64(name, t.shape(), t.data().to_vec())
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.arrays.get(name) {
            Some(NamedArray { shape, data: ArrayData::F64(v) }) => Ok((shape, v)),
            Some(_) => Err(Error::Archive(format!("{name} is not f64"))),
            None => Err(Error::Archive(format!("missing array {name}"))),
        }
    }

    pub fn i64(&self, name: &str) -> Result<(&[usize], &[i64])> {
        match self.arrays.get(name) {
            Some(NamedArray { shape, data: ArrayData::I64(v) }) => Ok((shape, v)),
            Some(_) => Err(Error::Archive(format!("{name} is not i64"))),
            None => Err(Error::Archive(format!("missing array {name}"))),
        }
    }

    pub fn u8(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.arrays.get(name) {
            Some(NamedArray { shape, data: ArrayData::U8(v) }) => Ok((shape, v)),
            Some(_) => Err(Error::Archive(format!("{name} is not u8"))),
            None => Err(Error::Archive(format!("missing array {name}"))),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let (shape, data) = self.f64(name)?;
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, arr) in &self.arrays {
            let offset = data.len() as u64;
            arr.data.write(&mut data);
            entries.push(Entry {
                name: name.clone(),
                dtype: arr.data.dtype().into(),
                shape: arr.shape.clone(),
                offset,
                nbytes: data.len() as u64 - offset,
            });
        }
        let manifest = serde_json::to_vec(&Manifest { version: VERSION, meta: self.meta.clone(), entries })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Archive("not a named-array archive (bad magic)".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let mend = usize::try_from(mlen)
            .ok()
            .and_then(|m| m.checked_add(16))
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| Error::Archive("manifest length exceeds file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..mend])
            .map_err(|e| Error::Archive(format!("bad manifest: {e}")))?;
        if manifest.version != VERSION {
            return Err(Error::ArchiveVersion { found: manifest.version, expected: VERSION });
        }
        let data = &bytes[mend..];
        let mut out = Self { meta: manifest.meta, arrays: BTreeMap::new() };
        for e in manifest.entries {
            let range = usize::try_from(e.offset)
                .ok()
                .zip(usize::try_from(e.nbytes).ok())
                .and_then(|(o, n)| o.checked_add(n).map(|end| o..end))
                .filter(|r| r.end <= data.len())
                .ok_or_else(|| Error::Archive(format!("{}: data out of bounds", e.name)))?;
            let arr = ArrayData::read(&e.dtype, &data[range])?;
            out.insert(e.name, &e.shape, arr)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.meta = serde_json::json!({"kind": "test", "step": 3});
        a.insert_f64("w", &[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        a.insert("flags", &[3], ArrayData::U8(vec![1, 0, 1])).unwrap();
        a.insert("idx", &[2], ArrayData::I64(vec![-1, 7])).unwrap();
        a
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
        let (_, w) = b.f64("w").unwrap();
        assert_eq!(w[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn version_mismatch_and_foreign_files() {
        let bytes = sample().to_bytes().unwrap();
        let mut bumped = bytes.clone();
        let at = bumped.windows(10).position(|w| w == b"\"version\":").unwrap() + 10;
        bumped[at] = b'9';
        assert!(matches!(Archive::from_bytes(&bumped), Err(Error::ArchiveVersion { found: 9, .. })));
        assert!(matches!(Archive::from_bytes(b"hello world, not an archive"), Err(Error::Archive(_))));
        let mut trunc = bytes.clone();
        trunc.truncate(bytes.len() - 5);
        assert!(Archive::from_bytes(&trunc).is_err());
        assert!(Archive::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn shape_checks_and_typed_access() {
        let mut a = Archive::new();
        assert!(a.insert_f64("x", &[3], vec![1.0]).is_err());
        let a = sample();
        assert!(a.f64("flags").is_err());
        assert!(a.u8("flags").is_ok());
        assert!(a.tensor("missing").is_err());
    }
}
