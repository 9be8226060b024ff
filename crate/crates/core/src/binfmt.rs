//! Little-endian binary file primitives shared by the model, codebook,
//! feature-dump and descriptor-matrix formats. Every file starts with an
//! 8-byte magic tag; loaders validate the tag and all declared lengths
//! before touching the payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_magic<W: Write>(w: &mut W, magic: &[u8; 8], path: &Path) -> Result<()> {
    w.write_all(magic).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_magic<R: Read>(r: &mut R, magic: &[u8; 8], path: &Path) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    if &buf != magic {
        return Err(Error::BadFormat {
            path: path.to_path_buf(),
            reason: format!(
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&buf)
            ),
        });
    }
    Ok(())
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_f64_slice<W: Write>(w: &mut W, vs: &[f64], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_f32_slice<W: Write>(w: &mut W, vs: &[f32], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 4);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64<R: Read>(r: &mut R, path: &Path) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(f64::from_le_bytes(buf))
}

pub(crate) fn read_f64_vec<R: Read>(r: &mut R, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn read_f32_vec<R: Read>(r: &mut R, n: usize, path: &Path) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Guard against absurd declared lengths before allocating.
pub(crate) fn check_len(n: u64, cap: u64, what: &str, path: &Path) -> Result<usize> {
    if n > cap {
        return Err(Error::BadFormat {
            path: path.to_path_buf(),
            reason: format!("declared {what} = {n} exceeds sanity cap {cap}"),
        });
    }
    Ok(n as usize)
}
