//! GMT1 tensor container used for exported feature tokens and checkpoints.
//!
//! Layout: ASCII `GMT1`, `u8` dtype code, `u8` rank, two zero bytes,
//! `rank` little-endian `u64` extents, then the row-major payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const GMT_MAGIC: &[u8; 4] = b"GMT1";
const FIXED_HEADER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32Le = 1,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32Le),
            other => Err(Error::Format(format!("unknown GMT1 dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32Le => 4,
        }
    }
}

/// A shaped block of `f32` values as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor payload", numel, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} too large", self.shape.len())));
        }
        let numel: usize = self.shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("tensor payload", numel, self.data.len()));
        }
        let mut out = Vec::with_capacity(FIXED_HEADER + 8 * self.shape.len() + 4 * numel);
        out.extend_from_slice(GMT_MAGIC);
        out.push(DType::F32Le as u8);
        out.push(self.shape.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FIXED_HEADER {
            return Err(Error::Length {
                expected: FIXED_HEADER as u64,
                found: bytes.len() as u64,
            });
        }
        if &bytes[0..4] != GMT_MAGIC {
            return Err(Error::Format(format!(
                "bad GMT1 magic {:?}",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        let dtype = DType::from_code(bytes[4])?;
        let rank = bytes[5] as usize;
        let header = FIXED_HEADER + 8 * rank;
        if bytes.len() < header {
            return Err(Error::Length {
                expected: header as u64,
                found: bytes.len() as u64,
            });
        }
        let shape: Vec<usize> = bytes[FIXED_HEADER..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let numel = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::Format("GMT1 extents overflow".into()))?;
        let expected = header as u64 + numel * dtype.size() as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::Length {
                expected,
                found: bytes.len() as u64,
            });
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { shape, data })
    }
}

pub fn write_gmt(tensor: &TensorFile, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = tensor.to_bytes()?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_gmt(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorFile::from_bytes(&bytes)
}
