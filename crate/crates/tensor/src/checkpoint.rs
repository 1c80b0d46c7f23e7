//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "ENSH"
//! version  u16      currently 1
//! count    u32      number of entries
//! entry*   count times:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   shape    4 x u32 (n, c, h, w)
//!   values   n*c*h*w x f64, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"ENSH";
pub const VERSION: u16 = 1;

pub fn write_to(store: &ParamStore, mut out: impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, value) in store.iter() {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u32).to_le_bytes())?;
        out.write_all(bytes)?;
        for d in value.shape().0 {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_from(mut input: impl Read) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut ver = [0u8; 2];
    input.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = read_u32(&mut input)? as usize;
        }
        let shape = Shape(dims);
        let mut buf = vec![0u8; shape.numel() * 8];
        input.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if store.id(&name).is_some() {
            return Err(TensorError::Checkpoint(format!("duplicate entry {name}")));
        }
        store.add(name, Tensor::from_vec(shape, data)?);
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_to(store, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    read_from(bytes.as_slice())
}
