//! Binary tensor container.
//!
//! Layout: the line `#ckpt v1\n`, then for each record until end of file:
//! name length (u32), name (UTF-8), dtype code (u8), rank (u32), dims (u64
//! each), raw little-endian element data. Dtype codes: 0 f32, 1 f64, 2 u8,
//! 3 u64. All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8] = b"#ckpt v1\n";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl Payload {
    fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => DType::F32.code(),
            Payload::F64(_) => DType::F64.code(),
            Payload::U8(_) => 2,
            Payload::U64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = t.data().iter().map(|x| x.as_f64());
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(data.map(|x| x as f32).collect()),
            DType::F64 => Payload::F64(data.collect()),
        };
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload,
        }
    }

    pub fn bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            name: name.into(),
            shape: vec![bytes.len()],
            payload: Payload::U8(bytes.to_vec()),
        }
    }

    pub fn words(name: impl Into<String>, words: &[u64]) -> Self {
        Self {
            name: name.into(),
            shape: vec![words.len()],
            payload: Payload::U64(words.to_vec()),
        }
    }

    /// Float payload as a tensor of `T`; the stored dtype must match.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match (&self.payload, T::DTYPE) {
            (Payload::F32(v), DType::F32) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            (Payload::F64(v), DType::F64) => v.iter().map(|&x| T::lit(x)).collect(),
            _ => {
                return Err(Error::invalid(format!(
                    "record {} has dtype code {}, expected {:?}",
                    self.name,
                    self.payload.code(),
                    T::DTYPE
                )))
            }
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn as_bytes(&self) -> Result<&[u8]> {
        match &self.payload {
            Payload::U8(v) => Ok(v),
            _ => Err(Error::invalid(format!(
                "record {} is not a byte record",
                self.name
            ))),
        }
    }

    pub fn as_words(&self) -> Result<&[u64]> {
        match &self.payload {
            Payload::U64(v) => Ok(v),
            _ => Err(Error::invalid(format!(
                "record {} is not a u64 record",
                self.name
            ))),
        }
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.payload.code());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &r.payload {
            Payload::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            Payload::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::U64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::data(
                    self.path,
                    None,
                    format!("truncated checkpoint at byte {}", self.pos),
                )
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(buf: &[u8], path: &Path) -> Result<Vec<Record>> {
    if !buf.starts_with(MAGIC) {
        return Err(Error::data(
            path,
            None,
            "not a checkpoint (missing #ckpt v1 header)",
        ));
    }
    let mut r = Reader {
        buf,
        pos: MAGIC.len(),
        path,
    };
    let mut records = Vec::new();
    while r.pos < buf.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::data(path, None, "record name is not UTF-8"))?
            .to_owned();
        let code = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = match code {
            0 => Payload::F32(
                r.take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            1 => Payload::F64(
                r.take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            2 => Payload::U8(r.take(n)?.to_vec()),
            3 => Payload::U64(
                r.take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            other => {
                return Err(Error::data(
                    path,
                    None,
                    format!("record {name}: unknown dtype code {other}"),
                ))
            }
        };
        debug_assert_eq!(payload.len(), n);
        records.push(Record {
            name,
            shape,
            payload,
        });
    }
    Ok(records)
}

/// Write via a temporary file and rename, so a crash never leaves a partial
/// checkpoint under the final name.
pub fn write(path: &Path, records: &[Record]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(records)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf, path)
}

pub fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Record> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::invalid(format!("checkpoint has no record {name}")))
}
