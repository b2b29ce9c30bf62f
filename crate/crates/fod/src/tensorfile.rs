//! Bit-exact binary tensor files.
//!
//! Single-tensor layout: magic `FODT`, version byte, rank byte, extents as
//! 32-bit little-endian unsigned, payload as 64-bit little-endian floats in
//! row-major order. A rank byte of 0xFF marks a container instead: an entry
//! count followed by (name length u16, name, rank, extents, payload) per
//! named entry. Write then read is the identity, bitwise.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FODT";
pub const VERSION: u8 = 1;
const CONTAINER_RANK: u8 = 0xFF;
const MAX_RANK: u8 = 8;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    encode_body(&mut out, t);
    out
}

fn encode_body(out: &mut Vec<u8>, t: &Tensor) {
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_container(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(CONTAINER_RANK);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        if name.len() > u16::MAX as usize {
            return Err(Error::config(format!("entry name too long: {name}")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        encode_body(&mut out, t);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn header(&mut self) -> Result<u8> {
        let magic = self.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:02x?}")));
        }
        let version = self.u8("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        self.u8("rank byte")
    }

    fn tensor_body(&mut self, rank: u8) -> Result<Tensor> {
        if rank > MAX_RANK {
            return Err(Error::format(
                (self.pos - 1) as u64,
                format!("rank {rank} exceeds maximum {MAX_RANK}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let at = self.pos;
            let e = self.u32("extent")?;
            if e == 0 {
                return Err(Error::format(at as u64, "zero extent"));
            }
            shape.push(e as usize);
        }
        let len: usize = shape.iter().product();
        let payload = self.take(8 * len, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(shape, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    let rank = r.header()?;
    if rank == CONTAINER_RANK {
        return Err(Error::format(5, "expected a single tensor, found a container"));
    }
    let t = r.tensor_body(rank)?;
    r.finish()?;
    Ok(t)
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let rank = r.header()?;
    if rank != CONTAINER_RANK {
        return Err(Error::format(5, "expected a container, found a single tensor"));
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "entry name")?)
            .map_err(|_| Error::format(at as u64, "entry name is not utf-8"))?
            .to_string();
        let rank = r.u8("entry rank")?;
        let t = r.tensor_body(rank)?;
        entries.push((name, t));
    }
    r.finish()?;
    Ok(entries)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn write_container(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_container(entries)?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_container(&fs::read(path)?)
}

/// Looks up one entry by name in a decoded container.
pub fn find_entry<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::config(format!("container is missing entry '{name}'")))
}
