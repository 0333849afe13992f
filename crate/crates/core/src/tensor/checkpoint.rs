//! Binary checkpoint format for named tensors.
//!
//! Layout (all integers little-endian):
//!   magic "TSEG" | version u32 | tensor count u32
//!   per tensor: name_len u32 | name (UTF-8) | rank u32 | dims u32×rank | data f64×∏dims
//!
//! f64 payloads are written via `to_le_bytes`, so round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::value::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSEG";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_ELEMENTS: usize = 1 << 30;

pub fn write_checkpoint<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        let bytes = name.as_bytes();
        if bytes.len() > MAX_NAME_LEN {
            return Err(Error::Format(format!("tensor name too long: {name:?}")));
        }
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Format(format!("tensor name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::Format("truncated tensor name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut elems: usize = 1;
        for _ in 0..rank {
            let d = read_u32(r)? as usize;
            elems = elems
                .checked_mul(d)
                .filter(|&e| e <= MAX_ELEMENTS)
                .ok_or_else(|| Error::Format("tensor too large".into()))?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(elems);
        let mut buf = [0u8; 8];
        for _ in 0..elems {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated data for tensor {name:?}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        if store.contains(&name) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated checkpoint field".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, store)?;
    crate::util::write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut f = std::fs::File::open(path)?;
    read_checkpoint(&mut f)
}
