//! Checkpoint container: string metadata plus named tensors in one file.
//!
//! Layout, all integers little-endian: 4-byte magic "SGC1"; u32 metadata
//! count, then per entry u32 key length, key bytes, u32 value length, value
//! bytes; u32 tensor count, then per tensor u32 name length, name bytes, u64
//! blob length, and the tensor encoded in its own container format. Entries
//! are sorted by key and name, so identical contents give identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::{self, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SGC1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks metadata key {:?}", key)))?;
        v.parse().map_err(|_| {
            Error::Contract(format!("checkpoint metadata {:?} is not an integer: {:?}", key, v))
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor {:?}", name)))
    }
}

/// 64-bit FNV-1a, used to fingerprint configuration text in metadata.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(ckpt.meta.len() as u32).to_le_bytes());
    for (k, v) in &ckpt.meta {
        push_str(&mut out, k);
        push_str(&mut out, v);
    }
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        push_str(&mut out, name);
        let blob = tensor::encode(t)?;
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {}", what),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let pos = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: pos as u64,
            msg: format!("{} is not valid UTF-8", what),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {:02x?}", magic) });
    }
    let n_meta = r.u32("metadata count")?;
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let k = r.string("metadata key")?;
        let v = r.string("metadata value")?;
        meta.insert(k, v);
    }
    let n_tensors = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = r.string("tensor name")?;
        let blob_len = r.u64("tensor blob length")? as usize;
        let blob_off = r.pos as u64;
        let blob = r.take(blob_len, "tensor blob")?;
        let t = tensor::decode(blob).map_err(|e| match e {
            Error::Format { offset, msg } => {
                Error::Format { offset: blob_off + offset, msg: format!("tensor {:?}: {}", name, msg) }
            }
            other => other,
        })?;
        tensors.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
