//! Binary checkpoint container: a flat list of named, typed arrays.
//!
//! Layout (little-endian): magic `COOC`, u32 version, u64 config hash,
//! u32 entry count, then per entry a u32 name length, the UTF-8 name, a u8
//! dtype code (0 f32, 1 f64, 2 u64), a u32 rank, u64 dims and the payload.
//! A SHA-256 digest of everything before it closes the file.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"COOC";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl EntryData {
    pub fn u64s(data: Vec<u64>) -> Self {
        EntryData::U64 { shape: vec![data.len()], data }
    }

    fn code(&self) -> u8 {
        match self {
            EntryData::F32(_) => 0,
            EntryData::F64(_) => 1,
            EntryData::U64 { .. } => 2,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            EntryData::F32(t) => t.shape(),
            EntryData::F64(t) => t.shape(),
            EntryData::U64 { shape, .. } => shape,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            EntryData::F32(_) => "f32",
            EntryData::F64(_) => "f64",
            EntryData::U64 { .. } => "u64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub data: EntryData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(config_hash: u64) -> Self {
        Checkpoint { config_hash, entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, data: EntryData) {
        self.entries.push(Entry { name: name.into(), data });
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.push(name, EntryData::F32(t.clone()));
    }

    pub fn push_u64s(&mut self, name: impl Into<String>, v: Vec<u64>) {
        self.push(name, EntryData::u64s(v));
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.code());
            let shape = e.data.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                EntryData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                EntryData::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 4 + DIGEST_LEN {
            return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match code {
                0 => {
                    let raw = r.take(n * 4)?;
                    let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    EntryData::F32(Tensor::new(&shape, v)?)
                }
                1 => {
                    let raw = r.take(n * 8)?;
                    let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    EntryData::F64(Tensor::new(&shape, v)?)
                }
                2 => {
                    let raw = r.take(n * 8)?;
                    let data = raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
                    EntryData::U64 { shape, data }
                }
                other => return Err(Error::Checkpoint(format!("entry `{name}` has unknown dtype code {other}"))),
            };
            entries.push(Entry { name, data });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after the last entry", body.len() - r.pos)));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch, file is corrupt".into()));
        }
        Ok(Checkpoint { config_hash, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Sequential reader that checks names, kinds and shapes against the
    /// expected structure.
    pub fn reader(&self) -> EntryReader<'_> {
        EntryReader { entries: &self.entries, pos: 0 }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub struct EntryReader<'a> {
    entries: &'a [Entry],
    pos: usize,
}

impl<'a> EntryReader<'a> {
    fn next(&mut self, name: &str, kind: &str) -> Result<&'a EntryData> {
        let e = self.entries.get(self.pos).ok_or_else(|| {
            Error::Checkpoint(format!("missing tensor `{name}` (checkpoint has {} entries)", self.entries.len()))
        })?;
        if e.name != name {
            return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{}`", e.name)));
        }
        if e.data.kind() != kind {
            return Err(Error::Checkpoint(format!("tensor `{name}` is {}, expected {kind}", e.data.kind())));
        }
        self.pos += 1;
        Ok(&e.data)
    }

    /// Next f32 entry; must be named `name` with shape `shape`.
    pub fn f32(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        match self.next(name, "f32")? {
            EntryData::F32(t) if t.shape() == shape => Ok(t.clone()),
            EntryData::F32(t) => Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            ))),
            _ => unreachable!("kind checked"),
        }
    }

    /// Next u64 entry of exactly `len` values.
    pub fn u64s(&mut self, name: &str, len: usize) -> Result<Vec<u64>> {
        match self.next(name, "u64")? {
            EntryData::U64 { data, .. } if data.len() == len => Ok(data.clone()),
            EntryData::U64 { data, .. } => {
                Err(Error::Checkpoint(format!("tensor `{name}` has {} values, expected {len}", data.len())))
            }
            _ => unreachable!("kind checked"),
        }
    }

    pub fn finish(&self) -> Result<()> {
        match self.entries.get(self.pos) {
            Some(e) => Err(Error::Checkpoint(format!("unexpected extra tensor `{}`", e.name))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(0xdead_beef);
        c.push_f32("a", &Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE]).unwrap());
        c.push("b", EntryData::F64(Tensor::new(&[1], vec![0.1]).unwrap()));
        c.push_u64s("c", vec![u64::MAX, 0, 7]);
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let bytes = sample().encode();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(Checkpoint::decode(&flipped).is_err());
    }

    #[test]
    fn reader_names_the_first_mismatch() {
        let c = sample();
        let mut r = c.reader();
        let err = r.f32("a", &[4]).unwrap_err().to_string();
        assert!(err.contains("`a`"), "{err}");
        let mut r = c.reader();
        r.f32("a", &[2, 2]).unwrap();
        let err = r.f32("x", &[1]).unwrap_err().to_string();
        assert!(err.contains("`x`") && err.contains("`b`"), "{err}");
    }
}
