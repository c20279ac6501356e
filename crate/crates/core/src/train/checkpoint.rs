//! Binary checkpoint: a magic tag, a format version and a list of named,
//! typed, shaped arrays, all little-endian.
//!
//! ```text
//! "UAGLCKPT" | u32 version | u32 count | count x entry
//! entry = u32 name_len | name | u8 dtype | u32 ndim | ndim x u64 dim | data
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"UAGLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
    U64(Vec<usize>, Vec<u64>),
    U8(Vec<usize>, Vec<u8>),
}

impl Array {
    fn tag(&self) -> u8 {
        match self {
            Array::F32(..) => 0,
            Array::F64(..) => 1,
            Array::U64(..) => 2,
            Array::U8(..) => 3,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Array::F32(s, _) | Array::F64(s, _) | Array::U64(s, _) | Array::U8(s, _) => s,
        }
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        let shape = t.shape().to_vec();
        match T::DTYPE {
            DType::F32 => Array::F32(shape, t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => Array::F64(shape, t.data().iter().map(|v| v.as_f64()).collect()),
        }
    }

    /// Converts a floating-point array to the requested element type.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        match self {
            Array::F32(s, d) => Tensor::new(s, d.iter().map(|&v| T::lit(v as f64)).collect()),
            Array::F64(s, d) => Tensor::new(s, d.iter().map(|&v| T::lit(v)).collect()),
            _ => Err(Error::Checkpoint("expected a floating-point array".into())),
        }
    }
}

/// An ordered collection of named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<(String, Array)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Archive {
    pub fn push(&mut self, name: impl Into<String>, a: Array) {
        self.entries.push((name.into(), a));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&Array> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
    }

    pub fn u64_scalar(&self, name: &str) -> Result<u64> {
        match self.require(name)? {
            Array::U64(_, d) if d.len() == 1 => Ok(d[0]),
            _ => Err(Error::Checkpoint(format!("{name} is not a u64 scalar"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match self.require(name)? {
            Array::U8(_, d) => String::from_utf8(d.clone()).map_err(|_| Error::Checkpoint(format!("{name} is not UTF-8"))),
            _ => Err(Error::Checkpoint(format!("{name} is not a byte array"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend(VERSION.to_le_bytes());
        out.extend((self.entries.len() as u32).to_le_bytes());
        for (name, a) in &self.entries {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.push(a.tag());
            out.extend((a.shape().len() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            match a {
                Array::F32(_, d) => d.iter().for_each(|v| v.write_le(&mut out)),
                Array::F64(_, d) => d.iter().for_each(|v| v.write_le(&mut out)),
                Array::U64(_, d) => d.iter().for_each(|v| out.extend(v.to_le_bytes())),
                Array::U8(_, d) => out.extend(d),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let tag = r.take(1, "dtype")?[0];
            let ndim = r.u32("rank")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64("extent").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let what = format!("data of {name}");
            let a = match tag {
                0 => Array::F32(shape, r.take(4 * n, &what)?.chunks(4).map(f32::read_le).collect()),
                1 => Array::F64(shape, r.take(8 * n, &what)?.chunks(8).map(f64::read_le).collect()),
                2 => Array::U64(
                    shape,
                    r.take(8 * n, &what)?
                        .chunks(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                3 => Array::U8(shape, r.take(n, &what)?.to_vec()),
                t => return Err(Error::Checkpoint(format!("unknown dtype tag {t} for {name}"))),
            };
            entries.push((name, a));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Archive { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
