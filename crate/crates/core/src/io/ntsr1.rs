//! NTSR1: the tensor blob format used everywhere tensors touch disk.
//!
//! Layout, all integers little-endian:
//! ```text
//! magic   5 bytes  b"NTSR1"
//! dtype   u8       0 = f32, 1 = f64
//! rank    u32
//! extents rank x u64
//! data    product(extents) scalars, little-endian
//! ```

use std::fs;
use std::path::Path;

use super::IoFormatError;
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 5] = b"NTSR1";

/// A tensor of either supported dtype, as read from disk.
#[derive(Debug, Clone)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested scalar type (lossy when narrowing).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_ntsr1<T: Scalar>(path: &Path, tensor: &Tensor<T>) -> Result<(), IoFormatError> {
    let mut buf = Vec::with_capacity(16 + tensor.numel() * T::BYTES);
    buf.extend_from_slice(MAGIC);
    buf.push(T::DTYPE.tag());
    buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &extent in tensor.shape() {
        buf.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    fs::write(path, &buf).map_err(|e| IoFormatError::io(path, e))
}

fn parse(path: &Path, bytes: &[u8]) -> Result<AnyTensor, IoFormatError> {
    let bad = |reason: &str| IoFormatError::malformed(path, reason);
    if bytes.len() < 10 {
        return Err(bad("truncated header"));
    }
    if &bytes[..5] != MAGIC {
        return Err(bad("missing NTSR1 magic"));
    }
    let dtype = Dtype::from_tag(bytes[5]).ok_or_else(|| bad("unknown dtype tag"))?;
    let rank = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header_len = 10 + rank * 8;
    if bytes.len() < header_len {
        return Err(bad("truncated extents"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 10 + i * 8;
        let extent = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        shape.push(extent as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = &bytes[header_len..];

    fn read_data<T: Scalar>(payload: &[u8], numel: usize) -> Option<Vec<T>> {
        if payload.len() != numel * T::BYTES {
            return None;
        }
        Some(
            payload
                .chunks_exact(T::BYTES)
                .map(|c| T::read_le(c))
                .collect(),
        )
    }

    let tensor = match dtype {
        Dtype::F32 => AnyTensor::F32(
            Tensor::new(
                shape,
                read_data::<f32>(payload, numel).ok_or_else(|| bad("payload length mismatch"))?,
            )
            .map_err(|e| bad(&e.to_string()))?,
        ),
        Dtype::F64 => AnyTensor::F64(
            Tensor::new(
                shape,
                read_data::<f64>(payload, numel).ok_or_else(|| bad("payload length mismatch"))?,
            )
            .map_err(|e| bad(&e.to_string()))?,
        ),
    };
    Ok(tensor)
}

/// Reads a blob of either dtype.
pub fn read_ntsr1_dtype(path: &Path) -> Result<AnyTensor, IoFormatError> {
    let bytes = fs::read(path).map_err(|e| IoFormatError::io(path, e))?;
    parse(path, &bytes)
}

/// Reads a blob whose stored dtype must match `T` exactly.
pub fn read_ntsr1<T: Scalar>(path: &Path) -> Result<Tensor<T>, IoFormatError> {
    let any = read_ntsr1_dtype(path)?;
    if any.dtype() != T::DTYPE {
        return Err(IoFormatError::DtypeMismatch {
            path: path.display().to_string(),
            stored: any.dtype().name(),
            requested: T::DTYPE.name(),
        });
    }
    Ok(any.cast())
}
