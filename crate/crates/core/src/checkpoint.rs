//! Named-tensor container: magic `HGCN`, u32 version, u32 entry count, then
//! per entry a u32-length name, u32 rank, u32 dims and f32 data, sorted by name.
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HGCN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub type Entries = BTreeMap<String, Tensor>;

pub fn encode(entries: &Entries) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::TruncatedFile {
            needed: self.pos.saturating_add(n),
            have: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Entries> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::MagicMismatch { expected: *MAGIC, found: magic.try_into().expect("4 bytes") });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut entries = Entries::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            numel = numel.checked_mul(d).ok_or(Error::Checkpoint(format!("{name}: shape overflows")))?;
            shape.push(d);
        }
        let raw = r.take(numel.checked_mul(4).ok_or(Error::Checkpoint(format!("{name}: shape overflows")))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if entries.insert(name.clone(), Tensor { shape, data }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::TrailingData { extra: bytes.len() - r.pos });
    }
    Ok(entries)
}

pub fn write(path: impl AsRef<Path>, entries: &Entries) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Entries> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
