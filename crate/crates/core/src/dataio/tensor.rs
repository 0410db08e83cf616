//! Minimal binary tensor container.
//!
//! Layout: 4-byte magic "SGT1", one dtype byte (0 = f32, 1 = i32, 2 = u8),
//! one rank byte, rank little-endian u32 dims, then the row-major payload in
//! little-endian order. A rank-0 file carries exactly one value.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const TENSOR_MAGIC: [u8; 4] = *b"SGT1";

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(Volume<f32>),
    I32(Volume<i32>),
    U8(Volume<u8>),
}

impl Tensor {
    pub fn dtype_code(&self) -> u8 {
        match self {
            Tensor::F32(_) => 0,
            Tensor::I32(_) => 1,
            Tensor::U8(_) => 2,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(v) => v.shape(),
            Tensor::I32(v) => v.shape(),
            Tensor::U8(v) => v.shape(),
        }
    }

    pub fn as_f32(&self) -> Result<&Volume<f32>> {
        match self {
            Tensor::F32(v) => Ok(v),
            other => Err(Error::Contract(format!(
                "expected a float32 tensor, found dtype code {}",
                other.dtype_code()
            ))),
        }
    }

    pub fn as_u8(&self) -> Result<&Volume<u8>> {
        match self {
            Tensor::U8(v) => Ok(v),
            other => Err(Error::Contract(format!(
                "expected a uint8 tensor, found dtype code {}",
                other.dtype_code()
            ))),
        }
    }
}

fn dtype_size(code: u8) -> usize {
    match code {
        0 => 4,
        1 => 4,
        2 => 1,
        _ => unreachable!("validated before use"),
    }
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::Contract(format!("rank {} exceeds the format limit", shape.len())));
    }
    for &d in shape {
        if d > u32::MAX as usize {
            return Err(Error::Contract(format!("dimension {} exceeds the format limit", d)));
        }
    }
    let mut out = Vec::with_capacity(6 + 4 * shape.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(t.dtype_code());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t {
        Tensor::F32(v) => {
            out.reserve(v.len() * 4);
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Tensor::I32(v) => {
            out.reserve(v.len() * 4);
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Tensor::U8(v) => out.extend_from_slice(v.data()),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let fmt = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
    if bytes.len() < 6 {
        return Err(fmt(bytes.len(), "file too short for a tensor header".into()));
    }
    if bytes[..4] != TENSOR_MAGIC {
        return Err(fmt(0, format!("bad magic {:02x?}", &bytes[..4])));
    }
    let dtype = bytes[4];
    if dtype > 2 {
        return Err(fmt(4, format!("unknown dtype code {}", dtype)));
    }
    let rank = bytes[5] as usize;
    let dims_end = 6 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(fmt(bytes.len(), format!("truncated dims: need {} bytes", dims_end)));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let off = 6 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| fmt(off, format!("dims overflow at dimension {}", i)))?;
        shape.push(d);
    }
    let expected = dims_end + count * dtype_size(dtype);
    if bytes.len() != expected {
        return Err(fmt(
            dims_end.min(bytes.len()),
            format!("payload length {} does not match expected {}", bytes.len() - dims_end, expected - dims_end),
        ));
    }
    let payload = &bytes[dims_end..];
    let tensor = match dtype {
        0 => Tensor::F32(Volume::new(
            shape,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )?),
        1 => Tensor::I32(Volume::new(
            shape,
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )?),
        _ => Tensor::U8(Volume::new(shape, payload.to_vec())?),
    };
    Ok(tensor)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
