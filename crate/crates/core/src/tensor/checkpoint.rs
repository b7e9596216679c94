//! Binary tensor container.
//!
//! Layout: the ASCII magic `RNSEG1`, the rank as a little-endian `u32`, one
//! `u32` per extent, a precision tag byte (4 or 8), then the raw little-endian
//! payload in row-major order.

use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"RNSEG1";

/// A decoded tensor in whatever precision it was stored with.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision (exact when widening).
    pub fn into_precision<T: Scalar>(self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(T::BYTES);
    out.reserve(t.len() * T::BYTES as usize);
    for &v in t.data() {
        v.write_le(out);
    }
}

fn take<'a>(bytes: &'a [u8], offset: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < *offset + n {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated tensor record while reading {what} (needed {n} bytes at {})", *offset),
        });
    }
    let s = &bytes[*offset..*offset + n];
    *offset += n;
    Ok(s)
}

fn read_u32(bytes: &[u8], offset: &mut usize, what: &str) -> Result<u32> {
    let b = take(bytes, offset, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

/// Decodes one record starting at `*offset`, advancing it past the record.
pub fn decode_tensor(bytes: &[u8], offset: &mut usize) -> Result<StoredTensor> {
    let start = *offset;
    let magic = take(bytes, offset, MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: start,
            message: "bad magic, expected RNSEG1".into(),
        });
    }
    let rank = read_u32(bytes, offset, "rank")? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Parse {
            offset: *offset - 4,
            message: format!("implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = *offset;
        let e = read_u32(bytes, offset, "extent")? as usize;
        if e == 0 {
            return Err(Error::Parse {
                offset: at,
                message: "zero extent".into(),
            });
        }
        shape.push(e);
    }
    let tag_at = *offset;
    let tag = take(bytes, offset, 1, "precision tag")?[0];
    let n: usize = shape.iter().product();
    match tag {
        4 => {
            let payload = take(bytes, offset, n * 4, "payload")?;
            let data = payload.chunks_exact(4).map(f32::read_le).collect();
            Ok(StoredTensor::F32(Tensor::from_parts(shape, data)))
        }
        8 => {
            let payload = take(bytes, offset, n * 8, "payload")?;
            let data = payload.chunks_exact(8).map(f64::read_le).collect();
            Ok(StoredTensor::F64(Tensor::from_parts(shape, data)))
        }
        other => Err(Error::Parse {
            offset: tag_at,
            message: format!("unknown precision tag {other}"),
        }),
    }
}

pub fn write_tensor_file<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<StoredTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut off = 0;
    let t = decode_tensor(&bytes, &mut off)?;
    if off != bytes.len() {
        return Err(Error::Parse {
            offset: off,
            message: "trailing bytes after tensor record".into(),
        });
    }
    Ok(t)
}
