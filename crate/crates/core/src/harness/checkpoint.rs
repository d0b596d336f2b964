//! Binary parameter files.
//!
//! Layout, all integers little-endian: magic `CHMB`, format version `u32`,
//! parameter count `u32`; then per parameter a `u16` name length, the UTF-8
//! name, a `u8` rank, one `u32` per extent and the `f32` values in
//! row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CHMB";
pub const VERSION: u32 = 1;

pub type Entry = (String, Tensor<f32>);

pub fn write<W: Write>(mut w: W, entries: &[Entry]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&len_u32(entries.len(), "parameter count")?.to_le_bytes())?;
    for (name, tensor) in entries {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(tensor.rank()).map_err(|_| Error::Checkpoint(format!("{name}: rank too large")))?;
        w.write_all(&[rank])?;
        for &extent in tensor.shape() {
            w.write_all(&len_u32(extent, name)?.to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(4 * tensor.len());
        for x in tensor.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what}: {n} exceeds u32")))
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<Entry>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(&mut r, &mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let shape = (0..rank[0]).map(|_| read_u32(&mut r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let mut bytes = vec![0u8; 4 * n];
        read_exact(&mut r, &mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok(entries)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn to_bytes(params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    write(&mut out, &params.snapshot()).expect("writing to memory succeeds");
    out
}

pub fn save(path: &Path, params: &ParamStore<f32>) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

/// Reads `path` into `params`, which must have the same names and shapes.
pub fn load(path: &Path, params: &mut ParamStore<f32>) -> Result<()> {
    let bytes = std::fs::read(path)?;
    params.load(&read(bytes.as_slice())?)
}
