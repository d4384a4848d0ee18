//! `HPTN` tensor container.
//!
//! Little-endian layout:
//!
//! | bytes            | field                                   |
//! |------------------|-----------------------------------------|
//! | 4                | magic `b"HPTN"`                         |
//! | 4                | version `u32 = 1`                       |
//! | 4                | dtype `u32` (`0` = f32)                 |
//! | 4                | rank `u32`                              |
//! | 8 * rank         | dims, `u64` each                        |
//! | 4 * prod(dims)   | `f32` payload, row-major, last dim fastest |
//!
//! Feature maps are rank 3 (`C, H, W`), masks rank 2 (`H, W`) and token or
//! prototype matrices rank 2 (`N, C`).

use std::fs;
use std::path::Path;

use super::{FeatureMap, Level, Mask};
use crate::error::{HpanError, Result};
use crate::matrix::Matrix;

pub const MAGIC: [u8; 4] = *b"HPTN";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;
/// Magic, version, dtype and rank; dims follow.
pub const HEADER_FIXED_BYTES: usize = 16;

/// A value that can be written to the container.
pub trait Storable {
    fn dims(&self) -> Vec<usize>;
    fn values(&self) -> &[f32];
    /// Type invariants checked before anything touches the disk.
    fn check(&self) -> Result<()>;
}

impl Storable for FeatureMap {
    fn dims(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }

    fn values(&self) -> &[f32] {
        &self.data
    }

    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl Storable for Mask {
    fn dims(&self) -> Vec<usize> {
        vec![self.height, self.width]
    }

    fn values(&self) -> &[f32] {
        &self.data
    }

    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl Storable for Matrix<f32> {
    fn dims(&self) -> Vec<usize> {
        vec![self.rows(), self.cols()]
    }

    fn values(&self) -> &[f32] {
        self.as_slice()
    }

    fn check(&self) -> Result<()> {
        match self.as_slice().iter().position(|v| !v.is_finite()) {
            Some(index) => Err(HpanError::NonFinite { index }),
            None => Ok(()),
        }
    }
}

/// What the caller expects to find in a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Features(Level),
    Mask,
    Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Features(FeatureMap),
    Mask(Mask),
    Matrix(Matrix<f32>),
}

impl Tensor {
    pub fn into_features(self) -> Result<FeatureMap> {
        match self {
            Tensor::Features(f) => Ok(f),
            _ => Err(HpanError::shape("expected a feature map")),
        }
    }

    pub fn into_mask(self) -> Result<Mask> {
        match self {
            Tensor::Mask(m) => Ok(m),
            _ => Err(HpanError::shape("expected a mask")),
        }
    }

    pub fn into_matrix(self) -> Result<Matrix<f32>> {
        match self {
            Tensor::Matrix(m) => Ok(m),
            _ => Err(HpanError::shape("expected a matrix")),
        }
    }
}

pub fn encode(tensor: &impl Storable) -> Vec<u8> {
    let dims = tensor.dims();
    let values = tensor.values();
    let mut buf = Vec::with_capacity(HEADER_FIXED_BYTES + 8 * dims.len() + 4 * values.len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &impl Storable) -> Result<()> {
    let path = path.as_ref();
    tensor.check()?;
    fs::write(path, encode(tensor)).map_err(|e| HpanError::io(path, e))
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"))
}

fn u64_at(bytes: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"))
}

/// Parses a container, returning `(dims, payload)`.
pub fn decode(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let truncated = |expected: u64| HpanError::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len() as u64,
    };
    if bytes.len() < HEADER_FIXED_BYTES {
        return Err(truncated(HEADER_FIXED_BYTES as u64));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(HpanError::BadMagic {
            path: path.to_path_buf(),
            found,
        });
    }
    let version = u32_at(bytes, 4);
    let dtype = u32_at(bytes, 8);
    if version != VERSION || dtype != DTYPE_F32 {
        return Err(HpanError::Unsupported {
            path: path.to_path_buf(),
            version,
            dtype,
        });
    }
    let rank = u32_at(bytes, 12) as usize;
    let header = HEADER_FIXED_BYTES as u64 + 8 * rank as u64;
    if (bytes.len() as u64) < header {
        return Err(truncated(header));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for r in 0..rank {
        let d = u64_at(bytes, HEADER_FIXED_BYTES + 8 * r);
        count = count.checked_mul(d).ok_or_else(|| HpanError::shape("dims overflow"))?;
        dims.push(d as usize);
    }
    let expected = count
        .checked_mul(4)
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| HpanError::shape("payload size overflow"))?;
    if (bytes.len() as u64) < expected {
        return Err(truncated(expected));
    }
    if (bytes.len() as u64) > expected {
        return Err(HpanError::shape(format!(
            "{} trailing bytes after payload",
            bytes.len() as u64 - expected
        )));
    }
    let values: Vec<f32> = bytes[header as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(HpanError::NonFinite { index });
    }
    Ok((dims, values))
}

/// Reads a container file and validates it as `kind`.
pub fn load_tensor(path: impl AsRef<Path>, kind: TensorKind) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HpanError::io(path, e))?;
    let (dims, values) = decode(path, &bytes)?;
    let rank_err = |want: usize| {
        HpanError::shape(format!(
            "{}: {:?} expects rank {want}, header advertises {} dims",
            path.display(),
            kind,
            dims.len()
        ))
    };
    match kind {
        TensorKind::Features(level) => {
            if dims.len() != 3 {
                return Err(rank_err(3));
            }
            FeatureMap::new(level, dims[0], dims[1], dims[2], values).map(Tensor::Features)
        }
        TensorKind::Mask => {
            if dims.len() != 2 {
                return Err(rank_err(2));
            }
            Mask::new(dims[0], dims[1], values).map(Tensor::Mask)
        }
        TensorKind::Matrix => {
            if dims.len() != 2 {
                return Err(rank_err(2));
            }
            Matrix::from_vec(dims[0], dims[1], values).map(Tensor::Matrix)
        }
    }
}
