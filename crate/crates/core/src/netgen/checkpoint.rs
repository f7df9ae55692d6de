//! Versioned binary checkpoints: a config header followed by named tensors.
//!
//! Layout (little endian): magic `DIPUQNET`, `u32` version, `u32` config
//! JSON length + bytes, `u32` tensor count, then per tensor `u32` name
//! length + UTF-8 name, `u8` dtype, `u32` rank, `u64` extents, raw values.

use std::fs;
use std::path::Path;

use super::{build_generator, GeneratorConfig, GeneratorNet, NamedTensor};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"DIPUQNET";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(net: &GeneratorNet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(net.config())?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE);
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            v.put_le(&mut out);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.into(),
                reason: "truncated checkpoint".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<GeneratorNet<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.into(),
        reason,
    };
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(bad("not a generator checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg: GeneratorConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    let mut net = build_generator::<T>(&cfg)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let dtype = r.take(1)?[0];
        if dtype != T::DTYPE {
            return Err(bad(format!("tensor {name} has dtype tag {dtype}, expected {}", T::DTYPE)));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::get_le).collect();
        params.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after last tensor".into()));
    }
    net.set_params(params)?;
    Ok(net)
}
