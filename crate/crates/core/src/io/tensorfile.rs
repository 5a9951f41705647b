//! `TNSR` tensor records.
//!
//! One record is `b"TNSR"`, a version byte (1), a dtype code (1 = f32,
//! 2 = f64, 3 = u8), an ndim byte, `ndim` little-endian u32 extents and the
//! little-endian row-major payload. A checkpoint is a run of records followed
//! by a trailer: `b"NAME"`, a u32 record count, that many u32-length-prefixed
//! UTF-8 names, and a u32-length-prefixed JSON metadata document.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"TNSR";
const TRAILER: &[u8; 4] = b"NAME";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unknown dtype code {0}")]
    DType(u8),
    #[error("truncated file: needed {needed} bytes for {what} at offset {offset}, {available} available")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("extents {0:?} overflow the addressable size")]
    ExtentOverflow(Vec<u32>),
    #[error("zero extent in {0:?}")]
    ZeroExtent(Vec<u32>),
    #[error("expected exactly one tensor, found {0}")]
    Count(usize),
    #[error("name table lists {names} names for {records} records")]
    NameCount { names: usize, records: usize },
    #[error("invalid name table: {0}")]
    Names(String),
    #[error("tensor `{name}` has dtype {found}, expected {expected}")]
    WrongDType { name: String, expected: &'static str, found: &'static str },
}

/// A tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum FileTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl FileTensor {
    fn code(&self) -> u8 {
        match self {
            FileTensor::F32(_) => 1,
            FileTensor::F64(_) => 2,
            FileTensor::U8 { .. } => 3,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            FileTensor::F32(_) => "f32",
            FileTensor::F64(_) => "f64",
            FileTensor::U8 { .. } => "u8",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            FileTensor::F32(t) => t.shape(),
            FileTensor::F64(t) => t.shape(),
            FileTensor::U8 { shape, .. } => shape,
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.code());
        let shape = self.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match self {
            FileTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            FileTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            FileTensor::U8 { data, .. } => out.extend_from_slice(data),
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], TensorFileError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(TensorFileError::Truncated { what, offset: self.pos, needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, TensorFileError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn peek4(&self) -> Option<&'a [u8]> {
        self.buf.get(self.pos..self.pos + 4)
    }
}

fn decode_record(c: &mut Cursor<'_>) -> Result<FileTensor, TensorFileError> {
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(TensorFileError::BadMagic(magic));
    }
    let header = c.take(3, "header")?;
    let (version, code, ndim) = (header[0], header[1], header[2] as usize);
    if version != VERSION {
        return Err(TensorFileError::Version(version));
    }
    let size = match code {
        1 => 4,
        2 => 8,
        3 => 1,
        other => return Err(TensorFileError::DType(other)),
    };
    let extents = (0..ndim).map(|_| c.u32("extents")).collect::<Result<Vec<u32>, _>>()?;
    if extents.contains(&0) {
        return Err(TensorFileError::ZeroExtent(extents));
    }
    let count = extents
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|n| n.checked_mul(size).is_some())
        .ok_or_else(|| TensorFileError::ExtentOverflow(extents.clone()))?;
    let payload = c.take(count * size, "payload")?;
    let shape: Vec<usize> = extents.iter().map(|&d| d as usize).collect();
    Ok(match code {
        1 => {
            let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4"))).collect();
            FileTensor::F32(Tensor::new(shape, data).expect("checked size"))
        }
        2 => {
            let data = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect();
            FileTensor::F64(Tensor::new(shape, data).expect("checked size"))
        }
        _ => FileTensor::U8 { shape, data: payload.to_vec() },
    })
}

/// Parameter names and the JSON metadata string.
type Trailer = (Vec<String>, String);

/// Parsed records and, if present, the name trailer.
fn decode_all(buf: &[u8]) -> Result<(Vec<FileTensor>, Option<Trailer>), TensorFileError> {
    let mut c = Cursor { buf, pos: 0 };
    let mut records = Vec::new();
    while !c.at_end() {
        if c.peek4() == Some(TRAILER.as_slice()) {
            c.take(4, "trailer")?;
            let n = c.u32("name count")? as usize;
            if n != records.len() {
                return Err(TensorFileError::NameCount { names: n, records: records.len() });
            }
            let mut names = Vec::with_capacity(n);
            for _ in 0..n {
                let len = c.u32("name length")? as usize;
                let bytes = c.take(len, "name")?;
                names.push(String::from_utf8(bytes.to_vec()).map_err(|e| TensorFileError::Names(e.to_string()))?);
            }
            let len = c.u32("metadata length")? as usize;
            let meta = String::from_utf8(c.take(len, "metadata")?.to_vec())
                .map_err(|e| TensorFileError::Names(e.to_string()))?;
            if !c.at_end() {
                return Err(TensorFileError::Names("bytes after the name trailer".into()));
            }
            return Ok((records, Some((names, meta))));
        }
        records.push(decode_record(&mut c)?);
    }
    Ok((records, None))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, TensorFileError> {
    fs::read(path).map_err(|source| TensorFileError::Io { path: path.display().to_string(), source })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), TensorFileError> {
    fs::write(path, bytes).map_err(|source| TensorFileError::Io { path: path.display().to_string(), source })
}

pub fn encode_tensor(t: &FileTensor) -> Vec<u8> {
    let mut out = Vec::new();
    t.encode(&mut out);
    out
}

pub fn decode_tensor(buf: &[u8]) -> Result<FileTensor, TensorFileError> {
    let (mut records, trailer) = decode_all(buf)?;
    if records.len() != 1 || trailer.is_some() {
        return Err(TensorFileError::Count(records.len()));
    }
    Ok(records.remove(0))
}

pub fn write_tensor_file(path: &Path, t: &FileTensor) -> Result<(), TensorFileError> {
    write_bytes(path, &encode_tensor(t))
}

pub fn read_tensor_file(path: &Path) -> Result<FileTensor, TensorFileError> {
    decode_tensor(&read_bytes(path)?)
}

/// Named f32 parameters plus a JSON metadata document (config echo, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn from_params(params: &ParamStore<f32>, metadata: serde_json::Value) -> Self {
        Self { tensors: params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(), metadata }
    }

    pub fn into_params(self) -> ParamStore<f32> {
        ParamStore::from_map(self.tensors)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in self.tensors.values() {
            FileTensor::F32(t.clone()).encode(&mut out);
        }
        out.extend_from_slice(TRAILER);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for name in self.tensors.keys() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        let meta = self.metadata.to_string();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, TensorFileError> {
        let (records, trailer) = decode_all(buf)?;
        let (names, meta) = trailer.ok_or_else(|| TensorFileError::Names("missing name trailer".into()))?;
        let metadata = serde_json::from_str(&meta).map_err(|e| TensorFileError::Names(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, rec) in names.into_iter().zip(records) {
            match rec {
                FileTensor::F32(t) => {
                    tensors.insert(name, t);
                }
                other => {
                    return Err(TensorFileError::WrongDType { name, expected: "f32", found: other.dtype_name() })
                }
            }
        }
        Ok(Self { tensors, metadata })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TensorFileError> {
    write_bytes(path, &ckpt.encode())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, TensorFileError> {
    Checkpoint::decode(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_payload() {
        let mut bytes = encode_tensor(&FileTensor::F32(Tensor::zeros(&[2, 2])));
        bytes.pop();
        assert!(matches!(decode_tensor(&bytes), Err(TensorFileError::Truncated { what: "payload", .. })));
    }

    #[test]
    fn header_layout() {
        let bytes = encode_tensor(&FileTensor::U8 { shape: vec![2, 1], data: vec![7, 9] });
        assert_eq!(bytes, [b'T', b'N', b'S', b'R', 1, 3, 2, 2, 0, 0, 0, 1, 0, 0, 0, 7, 9]);
    }

    #[test]
    fn rejects_bad_magic_and_overflow() {
        let mut bytes = encode_tensor(&FileTensor::U8 { shape: vec![1], data: vec![0] });
        bytes[0] = b'X';
        assert!(matches!(decode_tensor(&bytes), Err(TensorFileError::BadMagic(_))));
        let mut huge = b"TNSR\x01\x02\x03".to_vec();
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode_tensor(&huge), Err(TensorFileError::ExtentOverflow(_))));
    }
}
