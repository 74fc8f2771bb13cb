//! Max and average pooling with exact gradients.

use super::expect_rank;
use crate::tensor::{Scalar, Tensor, TensorError};

fn pool_output_dims(
    in_hw: (usize, usize),
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(usize, usize), TensorError> {
    if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(TensorError::InvalidParameter(
            "pool window and stride must be positive".into(),
        ));
    }
    if window.0 > in_hw.0 || window.1 > in_hw.1 {
        return Err(TensorError::InvalidDimension(format!(
            "pool window {window:?} exceeds input {in_hw:?}"
        )));
    }
    Ok((
        (in_hw.0 - window.0) / stride.0 + 1,
        (in_hw.1 - window.1) / stride.1 + 1,
    ))
}

/// Max pooling; returns the pooled tensor and, per output element, the flat
/// input index of the maximum. Ties go to the first maximal element in
/// row-major scan order, which fixes the gradient routing deterministically.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    expect_rank(input, 4, "maxpool2d")?;
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = pool_output_dims((h, w), window, stride)?;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let x = input.data();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best_idx = base + (i * stride.0) * w + j * stride.1;
                    let mut best = x[best_idx];
                    for u in 0..window.0 {
                        for v in 0..window.1 {
                            let idx = base + (i * stride.0 + u) * w + (j * stride.1 + v);
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((b * c + ch) * ho + i) * wo + j;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Tensor<T> {
    let mut grad_in = Tensor::zeros(input_shape);
    for (o, &src) in argmax.iter().enumerate() {
        grad_in.data_mut()[src] += grad_out.data()[o];
    }
    grad_in
}

pub fn avgpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>, TensorError> {
    expect_rank(input, 4, "avgpool2d")?;
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = pool_output_dims((h, w), window, stride)?;
    let inv = T::ONE / T::from_f64((window.0 * window.1) as f64);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let x = input.data();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = T::ZERO;
                    for u in 0..window.0 {
                        for v in 0..window.1 {
                            acc += x[base + (i * stride.0 + u) * w + (j * stride.1 + v)];
                        }
                    }
                    out.data_mut()[((b * c + ch) * ho + i) * wo + j] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

pub fn avgpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    window: (usize, usize),
    stride: (usize, usize),
) -> Tensor<T> {
    let s = grad_out.shape();
    let (n, c, ho, wo) = (s[0], s[1], s[2], s[3]);
    let (h, w) = (input_shape[2], input_shape[3]);
    let inv = T::ONE / T::from_f64((window.0 * window.1) as f64);
    let mut grad_in = Tensor::zeros(input_shape);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let g = grad_out.data()[((b * c + ch) * ho + i) * wo + j] * inv;
                    for u in 0..window.0 {
                        for v in 0..window.1 {
                            grad_in.data_mut()
                                [base + (i * stride.0 + u) * w + (j * stride.1 + v)] += g;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_of_constant_is_constant() {
        let x = Tensor::full(&[1, 2, 4, 4], 3.25f64);
        let (y, _) = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn maxpool_window_larger_than_input_errors() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            maxpool2d(&x, (3, 3), (1, 1)),
            Err(TensorError::InvalidDimension(_))
        ));
    }

    #[test]
    fn maxpool_tie_routes_to_first_row_major_index() {
        // All four window elements equal: gradient must land on index 0.
        let x = Tensor::full(&[1, 1, 2, 2], 1.0f64);
        let (y, argmax) = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(argmax, vec![0]);
        let g = Tensor::full(&[1, 1, 1, 1], 5.0f64);
        let gi = maxpool2d_backward(&g, &argmax, &[1, 1, 2, 2]);
        assert_eq!(gi.data(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_selects_maximum() {
        let x = Tensor::new(
            vec![1, 1, 2, 4],
            vec![1.0f64, 9.0, -2.0, 4.0, 0.0, 3.0, 8.0, 8.0],
        )
        .unwrap();
        let (y, argmax) = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[9.0, 8.0]);
        assert_eq!(argmax, vec![1, 6]); // first 8.0 in row-major order
    }

    #[test]
    fn avgpool_matches_mean_and_backward_is_adjoint() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = avgpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[2.5]);
        // avgpool is linear; verify <Ax, y> == <x, A^T y>.
        let g = Tensor::new(vec![1, 1, 1, 1], vec![2.0f64]).unwrap();
        let gi = avgpool2d_backward(&g, &[1, 1, 2, 2], (2, 2), (2, 2));
        let lhs = y.dot(&g).unwrap();
        let rhs = x.dot(&gi).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
