//! Named-tensor records, used for checkpoints.
//!
//! Record layout (all integers little-endian):
//! `[name_len: u32][name: UTF-8][dtype: u8 (0=F16, 1=F32)][rank: u32][extent: u32; rank][elements]`.
//! A table is a plain concatenation of records, read until EOF.

use std::io::{self, Read, Write};

use super::{DType, Tensor};
use crate::error::{Error, Result};

pub fn write_named<W: Write>(w: &mut W, name: &str, tensor: &Tensor) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&u32_of(name_bytes.len())?.to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[tensor.dtype().tag()])?;
    w.write_all(&u32_of(tensor.rank())?.to_le_bytes())?;
    for &extent in tensor.shape() {
        w.write_all(&u32_of(extent)?.to_le_bytes())?;
    }
    w.write_all(&tensor.to_le_bytes())?;
    Ok(())
}

/// Reads one record; `Ok(None)` on a clean EOF before the record starts.
pub fn read_named<R: Read>(r: &mut R) -> Result<Option<(String, Tensor)>> {
    let mut len = [0u8; 4];
    match read_exact_or_eof(r, &mut len)? {
        false => return Ok(None),
        true => {}
    }
    let name_len = u32::from_le_bytes(len) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let dtype = DType::from_tag(tag[0])?;
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let count: usize = shape.iter().product();
    let mut bytes = vec![0u8; count * dtype.size_in_bytes()];
    r.read_exact(&mut bytes)?;
    Ok(Some((
        name.clone(),
        Tensor::from_le_bytes(shape, dtype, &bytes)?,
    )))
}

pub fn write_table<'a, W, I>(w: &mut W, tensors: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    for (name, t) in tensors {
        write_named(w, name, t)?;
    }
    Ok(())
}

pub fn read_table<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    while let Some(entry) = read_named(r)? {
        out.push(entry);
    }
    Ok(out)
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{n} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}
