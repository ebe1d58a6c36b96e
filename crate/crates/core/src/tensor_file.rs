//! Binary tensor container.
//!
//! Layout, little-endian throughout:
//!
//! | bytes        | field                                |
//! |--------------|--------------------------------------|
//! | 0..8         | magic `ORYXTNSR`                     |
//! | 8..12        | version `u32` (currently 1)          |
//! | 12           | dtype code `u8` (0 = f32, 1 = f64)   |
//! | 13           | ndim `u8`                            |
//! | 14..14+4n    | dims `u32[ndim]`                     |
//! | rest         | row-major payload                    |
//!
//! The payload must be exactly `product(dims) * dtype size` bytes; readers
//! report the byte offset of the first violation.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};

use crate::error::{OryxError, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"ORYXTNSR";
pub const VERSION: u32 = 1;
const HEADER_FIXED: usize = 14;

/// A decoded tensor of either supported dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(a) => a.shape(),
            AnyTensor::F64(a) => a.shape(),
        }
    }

    /// Converts to the requested element type (a cast when dtypes differ).
    pub fn into_scalar<T: Scalar>(self) -> ArrayD<T> {
        match self {
            AnyTensor::F32(a) => a.mapv(|v| T::c(v as f64)),
            AnyTensor::F64(a) => a.mapv(T::c),
        }
    }
}

pub fn encode<T: Scalar>(tensor: &ArrayViewD<'_, T>) -> Result<Vec<u8>> {
    let ndim = tensor.ndim();
    if ndim > u8::MAX as usize {
        return Err(OryxError::invalid(format!("{ndim} dimensions exceed the format limit")));
    }
    let mut out = Vec::with_capacity(HEADER_FIXED + 4 * ndim + tensor.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(ndim as u8);
    for &d in tensor.shape() {
        let d = u32::try_from(d)
            .map_err(|_| OryxError::invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    // `iter` walks in logical row-major order regardless of memory layout.
    for &v in tensor.iter() {
        v.extend_le_bytes(&mut out);
    }
    Ok(out)
}

fn violation(offset: usize, reason: impl Into<String>) -> OryxError {
    OryxError::TensorFormat {
        offset,
        reason: reason.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    for (i, &m) in MAGIC.iter().enumerate() {
        match bytes.get(i) {
            None => return Err(violation(i, "truncated magic")),
            Some(&b) if b != m => return Err(violation(i, "bad magic")),
            _ => {}
        }
    }
    let version = read_u32(bytes, 8)?;
    if version != VERSION {
        return Err(violation(8, format!("unsupported version {version}")));
    }
    let code = *bytes.get(12).ok_or_else(|| violation(12, "truncated dtype"))?;
    let dtype =
        DType::from_code(code).ok_or_else(|| violation(12, format!("unknown dtype code {code}")))?;
    let ndim = *bytes.get(13).ok_or_else(|| violation(13, "truncated ndim"))? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for k in 0..ndim {
        dims.push(read_u32(bytes, HEADER_FIXED + 4 * k)? as usize);
    }
    let start = HEADER_FIXED + 4 * ndim;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| violation(HEADER_FIXED, "element count overflows"))?;
    let expected = count
        .checked_mul(dtype.size())
        .ok_or_else(|| violation(HEADER_FIXED, "payload size overflows"))?;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() < expected {
        return Err(violation(
            bytes.len(),
            format!("payload truncated: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(violation(
            start + expected,
            format!("{} trailing bytes after payload", payload.len() - expected),
        ));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(collect(payload, &dims)),
        DType::F64 => AnyTensor::F64(collect(payload, &dims)),
    })
}

fn collect<T: Scalar>(payload: &[u8], dims: &[usize]) -> ArrayD<T> {
    let data: Vec<T> = payload
        .chunks_exact(T::DTYPE.size())
        .map(T::from_le_slice)
        .collect();
    ArrayD::from_shape_vec(IxDyn(dims), data).expect("length checked against dims")
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let slice = bytes
        .get(at..at + 4)
        .ok_or_else(|| violation(bytes.len().max(at), "truncated header"))?;
    Ok(u32::from_le_bytes(slice.try_into().expect("4 bytes")))
}

pub fn write_file<T: Scalar>(path: impl AsRef<Path>, tensor: &ArrayViewD<'_, T>) -> Result<()> {
    fs::write(path, encode(tensor)?)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&fs::read(path)?)
}
