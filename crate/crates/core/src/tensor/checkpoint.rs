//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"CMTLCKPT"
//! version      u32       CHECKPOINT_VERSION
//! meta_len     u64
//! meta         meta_len bytes of UTF-8 JSON (free-form, "{}" when unused)
//! count        u32       number of tensors
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes of UTF-8, a slash-separated path
//!   rank       u32
//!   dims       rank × u64
//!   values     product(dims) × f64 (IEEE-754 bits, row-major)
//! ```
//!
//! Values are stored as raw bits so a round trip is bit-exact.

use std::io::{Read, Write};

use super::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CMTLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_container<W: Write>(mut w: W, c: &Container) -> Result<(), TensorError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(c.meta.len() as u64).to_le_bytes())?;
    w.write_all(c.meta.as_bytes())?;
    w.write_all(&(c.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &c.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TensorError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String, TensorError> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| TensorError::Checkpoint(e.to_string()))
}

pub fn read_container<R: Read>(mut r: R) -> Result<Container, TensorError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let meta = read_string(&mut r, meta_len)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Container { meta, tensors })
}
