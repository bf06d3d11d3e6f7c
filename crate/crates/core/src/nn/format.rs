//! `FQAL` tensor files: magic, version, count, named f32 tensors, CRC32 trailer.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FQAL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
        }
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(
        &u32::try_from(tensors.len())
            .map_err(|_| Error::Format("too many tensors".into()))?
            .to_le_bytes(),
    );
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("name too long: {}", t.name)))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        let dims = t.tensor.dims();
        buf.push(dims.len() as u8);
        for &d in dims {
            let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated model file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing FQAL magic".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("CRC32 mismatch".into()));
    }
    let mut c = Cursor {
        bytes: body,
        pos: 4,
    };
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported FQAL version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = c.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let tensor =
            Tensor::new(&dims, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        out.push(NamedTensor { name, tensor });
    }
    if c.pos != body.len() {
        return Err(Error::Format("trailing bytes before CRC".into()));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::data(path, e.to_string()))?
        .read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Splits a u64 into four u16 chunks that survive the f32 payload exactly.
pub fn u64_to_tensor(v: u64) -> Tensor {
    let chunks = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f64).collect();
    Tensor::new(&[4], chunks).expect("4 values")
}

pub fn tensor_to_u64(t: &Tensor) -> Result<u64> {
    if t.len() != 4 {
        return Err(Error::Format("u64 tensor needs 4 chunks".into()));
    }
    let mut v = 0u64;
    for (i, &c) in t.data().iter().enumerate() {
        if !(0.0..=65535.0).contains(&c) || c.fract() != 0.0 {
            return Err(Error::Format("invalid u64 chunk".into()));
        }
        v |= (c as u64) << (16 * i);
    }
    Ok(v)
}

pub fn find<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .map(|t| &t.tensor)
        .ok_or_else(|| Error::Format(format!("model file lacks tensor {name}")))
}
