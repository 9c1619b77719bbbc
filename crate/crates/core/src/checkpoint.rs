//! Versioned named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EXFU" | u32 version | u32 count | count × record
//!        | u32 meta_count | meta_count × record (names prefixed "meta/")
//! record = u32 name_len | name (UTF-8) | u8 dtype | u8 rank | rank × u64 dim | payload
//! ```
//!
//! Dtype codes: 0 = f32, 1 = f64, 2 = u64, 3 = u8.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"EXFU";
pub const VERSION: u32 = 1;
const META_PREFIX: &str = "meta/";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Payload {
    fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::U64(_) => 2,
            Payload::U8(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => Payload::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload,
        }
    }

    /// Floating-point payload as a tensor of the same precision.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match (&self.payload, T::DTYPE) {
            (Payload::F32(v), DType::F32) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            (Payload::F64(v), DType::F64) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
            _ => {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("`{}` is not stored as {}", self.name, T::DTYPE),
                ))
            }
        };
        Tensor::new(&self.shape, data)
    }

    pub fn dtype(&self) -> Option<DType> {
        match self.payload {
            Payload::F32(_) => Some(DType::F32),
            Payload::F64(_) => Some(DType::F64),
            _ => None,
        }
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Record>,
    /// Metadata records, keyed without the on-disk `meta/` prefix.
    pub meta: Vec<Record>,
}

impl Checkpoint {
    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push(Record::from_tensor(name, t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Record> {
        self.tensors.iter().find(|r| r.name == name)
    }

    fn meta_record(&self, key: &str) -> Result<&Record> {
        self.meta
            .iter()
            .find(|r| r.name == key)
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing metadata `{key}`")))
    }

    fn set_meta(&mut self, key: &str, shape: Vec<usize>, payload: Payload) {
        self.meta.retain(|r| r.name != key);
        self.meta.push(Record {
            name: key.to_string(),
            shape,
            payload,
        });
    }

    pub fn set_meta_str(&mut self, key: &str, value: &str) {
        let bytes = value.as_bytes().to_vec();
        self.set_meta(key, vec![bytes.len()], Payload::U8(bytes));
    }

    pub fn set_meta_u64(&mut self, key: &str, value: u64) {
        self.set_meta(key, vec![], Payload::U64(vec![value]));
    }

    pub fn set_meta_f64s(&mut self, key: &str, values: &[f64]) {
        self.set_meta(key, vec![values.len()], Payload::F64(values.to_vec()));
    }

    pub fn meta_str(&self, key: &str) -> Result<String> {
        match &self.meta_record(key)?.payload {
            Payload::U8(b) => String::from_utf8(b.clone())
                .map_err(|_| Error::invalid("checkpoint", format!("metadata `{key}` is not UTF-8"))),
            _ => Err(Error::invalid("checkpoint", format!("metadata `{key}` is not text"))),
        }
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        match &self.meta_record(key)?.payload {
            Payload::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::invalid("checkpoint", format!("metadata `{key}` is not a u64"))),
        }
    }

    pub fn meta_f64s(&self, key: &str) -> Result<Vec<f64>> {
        match &self.meta_record(key)?.payload {
            Payload::F64(v) => Ok(v.clone()),
            _ => Err(Error::invalid("checkpoint", format!("metadata `{key}` is not f64"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for r in &self.tensors {
            write_record(&mut out, &r.name, r);
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for r in &self.meta {
            write_record(&mut out, &format!("{META_PREFIX}{}", r.name), r);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.fail("bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("format version {version}, expected {VERSION}")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            ck.tensors.push(r.record()?);
        }
        let meta = r.u32()?;
        for _ in 0..meta {
            let mut rec = r.record()?;
            rec.name = rec
                .name
                .strip_prefix(META_PREFIX)
                .ok_or_else(|| r.fail(&format!("metadata record `{}` lacks prefix", rec.name)))?
                .to_string();
            ck.meta.push(rec);
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(ck)
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bin.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, r: &Record) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(r.payload.code());
    out.push(r.shape.len() as u8);
    for &d in &r.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &r.payload {
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::U8(v) => out.extend_from_slice(v),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: &str) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            reason: format!("{reason} (at byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.fail("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| self.fail("tensor name is not UTF-8"))?
            .to_string();
        let code = self.take(1)?[0];
        let rank = self.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.fail("shape overflows"))?;
        let width = match code {
            0 => 4,
            1 | 2 => 8,
            3 => 1,
            _ => return Err(self.fail(&format!("unknown dtype code {code} for `{name}`"))),
        };
        let raw = self.take(n.checked_mul(width).ok_or_else(|| self.fail("payload overflows"))?)?;
        let payload = match code {
            0 => Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => Payload::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => Payload::U8(raw.to_vec()),
        };
        let rec = Record { name, shape, payload };
        debug_assert_eq!(rec.numel(), rec.payload.len());
        Ok(rec)
    }
}
