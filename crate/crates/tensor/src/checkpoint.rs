//! Self-describing binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "CPRNCKPT"
//! version   u32
//! dtype     u8       4 = f32, 8 = f64
//! meta_len  u32      followed by meta_len bytes of UTF-8 metadata
//! count     u32
//! count x { name_len u16, name bytes, rank u8, rank x u32 dims, raw scalars }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::{DType, Error, Result, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"CPRNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    /// Free-form metadata, conventionally a JSON document.
    pub metadata: String,
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(metadata: impl Into<String>) -> Self {
        Self {
            metadata: metadata.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(S::DTYPE.code());
        let meta = self.metadata.as_bytes();
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(too_big)?.to_le_bytes());
        out.extend_from_slice(meta);
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(too_big)?.to_le_bytes());
        for (name, tensor) in &self.tensors {
            let name = name.as_bytes();
            out.extend_from_slice(&u16::try_from(name.len()).map_err(too_big)?.to_le_bytes());
            out.extend_from_slice(name);
            out.push(tensor.rank() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&u32::try_from(d).map_err(too_big)?.to_le_bytes());
            }
            for &x in tensor.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dtype = DType::from_code(r.take(1)?[0])
            .ok_or_else(|| Error::Checkpoint("unknown dtype".into()))?;
        if dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!(
                "stored as {dtype:?}, requested {:?}",
                S::DTYPE
            )));
        }
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * dtype.size())?;
            let data = raw.chunks_exact(dtype.size()).map(S::read_le).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn too_big<E>(_: E) -> Error {
    Error::Checkpoint("field exceeds format limits".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
