//! Little-endian primitives shared by the binary container formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn put_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    Ok(w.write_all(&[v])?)
}

pub fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub fn put_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

/// u32 length prefix followed by the bytes.
pub fn put_blob<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| Error::Format("blob too large".into()))?;
    put_u32(w, len)?;
    Ok(w.write_all(bytes)?)
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated record: {e}")))?;
    Ok(b)
}

pub fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    Ok(take::<1, _>(r)?[0])
}

pub fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r)?))
}

pub fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r)?))
}

pub fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(take(r)?))
}

pub fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated array: {e}")))?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn get_blob<R: Read>(r: &mut R, max: usize) -> Result<Vec<u8>> {
    let n = get_u32(r)? as usize;
    if n > max {
        return Err(Error::Format(format!("blob length {n} exceeds limit {max}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated blob: {e}")))?;
    Ok(buf)
}

pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let got: [u8; 8] = take(r)?;
    if &got != magic {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&got))));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
