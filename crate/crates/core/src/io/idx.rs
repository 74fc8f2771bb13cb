//! IDX image/label files (the MNIST on-disk layout).
//!
//! Headers are big-endian u32: magic 2051 for images (`[n, rows, cols]`
//! dims) and 2049 for labels (`[n]`), followed by raw u8 payload.

use std::fs;
use std::path::Path;

use super::IoFormatError;
use crate::tensor::{Scalar, Tensor};

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

fn read_u32_be(path: &Path, bytes: &[u8], off: usize) -> Result<u32, IoFormatError> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| IoFormatError::malformed(path, "truncated header"))
}

/// Reads `[n, 1, rows, cols]` images scaled from u8 into `[0, 1]`.
pub fn read_idx_images<T: Scalar>(path: &Path) -> Result<Tensor<T>, IoFormatError> {
    let bytes = fs::read(path).map_err(|e| IoFormatError::io(path, e))?;
    if read_u32_be(path, &bytes, 0)? != IMAGES_MAGIC {
        return Err(IoFormatError::malformed(path, "bad image magic"));
    }
    let n = read_u32_be(path, &bytes, 4)? as usize;
    let rows = read_u32_be(path, &bytes, 8)? as usize;
    let cols = read_u32_be(path, &bytes, 12)? as usize;
    let payload = &bytes[16..];
    if payload.len() != n * rows * cols {
        return Err(IoFormatError::malformed(path, "payload length mismatch"));
    }
    let scale = T::from_f64(1.0 / 255.0);
    let data = payload
        .iter()
        .map(|&b| T::from_f64(b as f64) * scale)
        .collect();
    Tensor::new(vec![n, 1, rows, cols], data)
        .map_err(|e| IoFormatError::malformed(path, e.to_string()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, IoFormatError> {
    let bytes = fs::read(path).map_err(|e| IoFormatError::io(path, e))?;
    if read_u32_be(path, &bytes, 0)? != LABELS_MAGIC {
        return Err(IoFormatError::malformed(path, "bad label magic"));
    }
    let n = read_u32_be(path, &bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(IoFormatError::malformed(path, "payload length mismatch"));
    }
    Ok(payload.to_vec())
}

/// Writes `[0, 1]`-scaled images back to u8 IDX (used by tests and tools).
pub fn write_idx_images<T: Scalar>(path: &Path, images: &Tensor<T>) -> Result<(), IoFormatError> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(IoFormatError::malformed(
            path,
            format!("expected [n,1,rows,cols] images, got {shape:?}"),
        ));
    }
    let (n, rows, cols) = (shape[0], shape[2], shape[3]);
    let mut buf = Vec::with_capacity(16 + n * rows * cols);
    buf.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(n as u32).to_be_bytes());
    buf.extend_from_slice(&(rows as u32).to_be_bytes());
    buf.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in images.data() {
        buf.push((v.to_f64() * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, &buf).map_err(|e| IoFormatError::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), IoFormatError> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    fs::write(path, &buf).map_err(|e| IoFormatError::io(path, e))
}
