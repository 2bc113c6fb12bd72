//! Little-endian binary containers.
//!
//! Feature file (`FMIT`):
//!
//! ```text
//! magic "FMIT" | version u32 = 1 | t u32 | n u32 | d u32 | t*n*d f32
//! ```
//!
//! Parameter checkpoint (`FMIP`), arrays stored in the order given by the
//! writer:
//!
//! ```text
//! magic "FMIP" | version u32 = 1 | count u32 |
//!   count * ( name_len u32 | name utf-8 | rank u32 | rank * dim u32 | f32 data )
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::RealArray;

pub const FEATURE_MAGIC: [u8; 4] = *b"FMIT";
pub const PARAM_MAGIC: [u8; 4] = *b"FMIP";
pub const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take_header(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::TruncatedHeader);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn header_u32(&mut self) -> Result<u32> {
        let b = self.take_header(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let b = self.take_header(4)?;
        let found = [b[0], b[1], b[2], b[3]];
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        let version = self.header_u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        Ok(())
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::ExtentOverflow(format!("{count} values")))?;
        if self.remaining() < bytes {
            return Err(Error::TruncatedPayload {
                expected: bytes as u64,
                found: self.remaining() as u64,
            });
        }
        let out = self.buf[self.pos..self.pos + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.pos += bytes;
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} trailing bytes after payload",
                self.remaining()
            )));
        }
        Ok(())
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::ExtentOverflow(format!("{what} = {v} exceeds u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Encodes a rank-3 `[t, n, d]` array as a feature file.
pub fn encode_features(values: &RealArray) -> Result<Vec<u8>> {
    let [t, n, d] = values.shape() else {
        return Err(Error::shape("encode_features", format!("{:?}", values.shape())));
    };
    let mut out = Vec::with_capacity(20 + values.len() * 4);
    out.extend_from_slice(&FEATURE_MAGIC);
    put_u32(&mut out, VERSION);
    for (v, what) in [(*t, "t"), (*n, "n"), (*d, "d")] {
        put_u32(&mut out, to_u32(v, what)?);
    }
    put_f32s(&mut out, values.data());
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<RealArray> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let t = r.header_u32()? as usize;
    let n = r.header_u32()? as usize;
    let d = r.header_u32()? as usize;
    let count = t
        .checked_mul(n)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| Error::ExtentOverflow(format!("{t} x {n} x {d}")))?;
    let data = r.f32s(count)?;
    r.finish()?;
    RealArray::new(vec![t, n, d], data)
}

pub fn encode_named(arrays: &[(String, RealArray)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&PARAM_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(arrays.len(), "array count")?);
    for (name, arr) in arrays {
        put_u32(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, to_u32(arr.rank(), "rank")?);
        for &dim in arr.shape() {
            put_u32(&mut out, to_u32(dim, "extent")?);
        }
        put_f32s(&mut out, arr.data());
    }
    Ok(out)
}

pub fn decode_named(bytes: &[u8]) -> Result<Vec<(String, RealArray)>> {
    let mut r = Reader::new(bytes);
    r.magic(PARAM_MAGIC)?;
    let count = r.header_u32()? as usize;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let name_len = r.header_u32()? as usize;
        let name = std::str::from_utf8(r.take_header(name_len)?)
            .map_err(|e| Error::InvalidArgument(format!("array name is not utf-8: {e}")))?
            .to_string();
        let rank = r.header_u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.header_u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ExtentOverflow(format!("{name}: {shape:?}")))?;
        let data = r.f32s(numel)?;
        arrays.push((name, RealArray::new(shape, data)?));
    }
    r.finish()?;
    Ok(arrays)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_checkpoint(path: &Path, arrays: &[(String, RealArray)]) -> Result<()> {
    write_file(path, &encode_named(arrays)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, RealArray)>> {
    decode_named(&read_file(path)?)
}
