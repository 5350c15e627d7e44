//! Named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"EVDT"  u16 version  u32 entry count
//! per entry: u32 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64),
//!            u32 rank, rank × u64 dims, row-major payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"EVDT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Raw entry payload, kept in its stored precision so round trips are bitwise.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    pub fn f64(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            dims: t.dims().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match &self.payload {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    /// Widened to `f64`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        };
        Tensor::from_vec(&self.dims, data)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorDump {
    pub entries: Vec<Entry>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl TensorDump {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.entries.push(Entry::f64(name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .ok_or_else(|| format_err(format!("missing entry `{name}`")))?
            .to_tensor()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(|_| format_err("too many entries"))?.to_le_bytes());
        for e in &self.entries {
            if e.dims.iter().product::<usize>() != e.len() {
                return Err(format_err(format!("entry `{}`: dims {:?} vs {} values", e.name, e.dims, e.len())));
            }
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype().code());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err("bad magic, not a tensor dump"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(format_err(format!("unsupported dump version {version}")));
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = u32::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| format_err("entry name is not UTF-8"))?;
            let dtype = match r.take(1)?[0] {
                0 => DType::F32,
                1 => DType::F64,
                c => return Err(format_err(format!("entry `{name}`: unknown dtype code {c}"))),
            };
            let rank = u32::from_le_bytes(r.array()?) as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(usize::try_from(u64::from_le_bytes(r.array()?)).map_err(|_| format_err("dimension overflow"))?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| format_err(format!("entry `{name}`: payload size overflow")))?;
            let raw = r.take(n)?;
            let payload = match dtype {
                DType::F32 => Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::F64 => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            entries.push(Entry { name, dims, payload });
        }
        if r.pos != bytes.len() {
            return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
