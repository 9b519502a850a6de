//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! b"MCAF"  u32 version = 1  u32 tensor_count
//! per tensor: u16 name_len, name (utf-8), u8 rank, u64 dims[rank], f32 data (row-major)
//! u32 config_len, config text (utf-8)
//! u64 step
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MCAF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub config: String,
    pub step: u64,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(too_big)?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&u16::try_from(name.len()).map_err(too_big)?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.shape().len()).map_err(too_big)?);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&u32::try_from(self.config.len()).map_err(too_big)?.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.err_at(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err_at(at, "tensor name is not utf-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let at = r.pos;
            let payload = r.take(n.checked_mul(4).ok_or_else(|| r.err_at(at, "tensor too large"))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.err_at(at, e.to_string()))?;
            tensors.push((name, t));
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let config = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.err_at(at, "config is not utf-8"))?
            .to_string();
        let step = r.u64()?;
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, "trailing bytes"));
        }
        Ok(Checkpoint { tensors, config, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn too_big<E>(_: E) -> Error {
    Error::Contract("checkpoint field exceeds its size limit".into())
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn err_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err_at(self.bytes.len(), format!("truncated: needed {n} bytes at {}", self.pos))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
