//! MELT binary tensor files.
//!
//! Layout: `b"MELT"`, `u8` version (1), `u8` dtype (0 = real64,
//! 1 = complex128), `u8` rank, five little-endian `u64` extents (unused
//! trailing extents are 1), then the little-endian row-major payload with
//! complex samples stored as interleaved `re, im`.

use std::fs;
use std::path::Path;

use super::{ComplexTensor, RealTensor, C64, MAX_RANK};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MELT";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 3 + 8 * MAX_RANK;

pub use super::AnyTensor as MeltTensor;

fn header(dtype: u8, shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype);
    out.push(shape.len() as u8);
    for i in 0..MAX_RANK {
        let d = shape.get(i).copied().unwrap_or(1) as u64;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

pub fn encode_real(t: &RealTensor) -> Vec<u8> {
    let mut out = header(0, t.shape());
    out.reserve(t.payload_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_complex(t: &ComplexTensor) -> Vec<u8> {
    let mut out = header(1, t.shape());
    out.reserve(t.payload_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
    out
}

pub fn encode(t: &MeltTensor) -> Vec<u8> {
    match t {
        MeltTensor::Real(r) => encode_real(r),
        MeltTensor::Complex(c) => encode_complex(c),
    }
}

fn f64_at(bytes: &[u8], i: usize) -> f64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&bytes[8 * i..8 * i + 8]);
    f64::from_le_bytes(b)
}

pub fn decode(bytes: &[u8]) -> Result<MeltTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = bytes[5];
    let rank = bytes[6] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("bad rank {rank}")));
    }
    let mut dims = [0usize; MAX_RANK];
    for (i, d) in dims.iter_mut().enumerate() {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[7 + 8 * i..15 + 8 * i]);
        *d = u64::from_le_bytes(b) as usize;
    }
    if dims[rank..].iter().any(|&d| d != 1) {
        return Err(Error::Format("unused trailing extents must be 1".into()));
    }
    let shape = &dims[..rank];
    let n: usize = shape.iter().product();
    let payload = &bytes[HEADER_LEN..];
    match dtype {
        0 => {
            if payload.len() != 8 * n {
                return Err(Error::Format("payload length mismatch".into()));
            }
            let data = (0..n).map(|i| f64_at(payload, i)).collect();
            Ok(MeltTensor::Real(RealTensor::from_vec(shape, data)?))
        }
        1 => {
            if payload.len() != 16 * n {
                return Err(Error::Format("payload length mismatch".into()));
            }
            let data = (0..n)
                .map(|i| C64::new(f64_at(payload, 2 * i), f64_at(payload, 2 * i + 1)))
                .collect();
            Ok(MeltTensor::Complex(ComplexTensor::from_vec(shape, data)?))
        }
        d => Err(Error::Format(format!("unknown dtype {d}"))),
    }
}

pub fn write(path: impl AsRef<Path>, t: &MeltTensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn write_real(path: impl AsRef<Path>, t: &RealTensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_real(t)).map_err(|e| Error::io(path, e))
}

pub fn write_complex(path: impl AsRef<Path>, t: &ComplexTensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_complex(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<MeltTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_real(path: impl AsRef<Path>) -> Result<RealTensor> {
    read(path)?.into_real()
}

pub fn read_complex(path: impl AsRef<Path>) -> Result<ComplexTensor> {
    read(path)?.into_complex()
}
