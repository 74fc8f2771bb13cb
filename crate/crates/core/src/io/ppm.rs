//! Binary PPM (P6) dumps for human inspection of perturbations and images.

use std::fs;
use std::path::Path;

use super::IoFormatError;
use crate::tensor::{Scalar, Tensor};

/// Writes a `[C,H,W]` tensor as a P6 PPM, mapping `[lo, hi]` linearly onto
/// 0..=255. Single-channel tensors are replicated to gray RGB; 3-channel
/// tensors map to RGB directly.
pub fn write_ppm<T: Scalar>(
    path: &Path,
    image: &Tensor<T>,
    lo: f64,
    hi: f64,
) -> Result<(), IoFormatError> {
    let shape = image.shape();
    if shape.len() != 3 || !(shape[0] == 1 || shape[0] == 3) {
        return Err(IoFormatError::malformed(
            path,
            format!("expected [1|3,H,W] image, got {shape:?}"),
        ));
    }
    if !(hi > lo) {
        return Err(IoFormatError::malformed(path, "empty value range"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let quantize = |v: T| -> u8 {
        let x = (v.to_f64() - lo) / (hi - lo);
        (x * 255.0).round().clamp(0.0, 255.0) as u8
    };
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for px in 0..plane {
        for ch in 0..3 {
            let src = if c == 3 { ch } else { 0 };
            buf.push(quantize(image.data()[src * plane + px]));
        }
    }
    fs::write(path, &buf).map_err(|e| IoFormatError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_ppm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let t = Tensor::new(vec![1, 1, 2], vec![-1.0f64, 1.0]).unwrap();
        write_ppm(&path, &t, -1.0, 1.0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn rejects_bad_channel_count() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f64>::zeros(&[2, 2, 2]);
        assert!(write_ppm(&dir.path().join("x.ppm"), &t, 0.0, 1.0).is_err());
    }
}
