//! 2-D convolution (cross-correlation) with zero or circular padding,
//! plus the exact gradients with respect to input, kernel, and bias.
//!
//! The input-gradient kernel doubles as the adjoint of the bias-free
//! operator, which is what power iteration runs on.

use super::{expect_rank, Padding};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Output spatial dims for an `(h, w)` input under the given geometry.
pub fn conv_output_dims(
    in_hw: (usize, usize),
    kernel_hw: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<(usize, usize), TensorError> {
    let (ph, pw) = padding.extents();
    let dim = |n: usize, k: usize, p: usize, s: usize, axis: &str| -> Result<usize, TensorError> {
        if s == 0 {
            return Err(TensorError::InvalidParameter("stride must be positive".into()));
        }
        if n + 2 * p < k {
            return Err(TensorError::InvalidDimension(format!(
                "kernel {axis}={k} exceeds padded input {}",
                n + 2 * p
            )));
        }
        Ok((n + 2 * p - k) / s + 1)
    };
    Ok((
        dim(in_hw.0, kernel_hw.0, ph, stride.0, "height")?,
        dim(in_hw.1, kernel_hw.1, pw, stride.1, "width")?,
    ))
}

struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn check_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<ConvGeometry, TensorError> {
    expect_rank(input, 4, "conv2d input")?;
    expect_rank(kernel, 4, "conv2d kernel")?;
    let (n, cin, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (cout, kcin, kh, kw) = {
        let s = kernel.shape();
        (s[0], s[1], s[2], s[3])
    };
    if kcin != cin {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d: kernel input channels".into(),
            expected: vec![cin],
            got: vec![kcin],
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d: bias".into(),
                expected: vec![cout],
                got: b.shape().to_vec(),
            });
        }
    }
    let (ho, wo) = conv_output_dims((h, w), (kh, kw), stride, padding)?;
    Ok(ConvGeometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho,
        wo,
    })
}

#[inline]
fn resolve_index(pos: isize, extent: usize, circular: bool) -> Option<usize> {
    if circular {
        Some(pos.rem_euclid(extent as isize) as usize)
    } else if pos >= 0 && (pos as usize) < extent {
        Some(pos as usize)
    } else {
        None
    }
}

/// `out[n,co,i,j] = bias[co] + sum_{ci,u,v} K[co,ci,u,v] * X[n,ci, i*sh-ph+u, j*sw-pw+v]`
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>, TensorError> {
    let g = check_geometry(input, kernel, bias, stride, padding)?;
    let (ph, pw) = padding.extents();
    let circular = matches!(padding, Padding::Circular(..));
    let mut out = Tensor::zeros(&[g.n, g.cout, g.ho, g.wo]);
    let x = input.data();
    let k = kernel.data();
    let o = out.data_mut();
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    for n in 0..g.n {
        for co in 0..g.cout {
            let bias_v = bias.map_or(T::ZERO, |b| b.data()[co]);
            for i in 0..g.ho {
                for j in 0..g.wo {
                    let mut acc = bias_v;
                    for ci in 0..g.cin {
                        let x_base = (n * g.cin + ci) * in_plane;
                        let k_base = ((co * g.cin + ci) * g.kh) * g.kw;
                        for u in 0..g.kh {
                            let y = (i * stride.0 + u) as isize - ph as isize;
                            let Some(y) = resolve_index(y, g.h, circular) else {
                                continue;
                            };
                            for v in 0..g.kw {
                                let xx = (j * stride.1 + v) as isize - pw as isize;
                                let Some(xx) = resolve_index(xx, g.w, circular) else {
                                    continue;
                                };
                                acc += k[k_base + u * g.kw + v] * x[x_base + y * g.w + xx];
                            }
                        }
                    }
                    o[(n * g.cout + co) * out_plane + i * g.wo + j] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient with respect to the input; equivalently the adjoint of the
/// bias-free convolution applied to `grad_out`.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: &[usize],
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>, TensorError> {
    expect_rank(grad_out, 4, "conv2d grad")?;
    let probe = Tensor::<T>::zeros(input_shape);
    let g = check_geometry(&probe, kernel, None, stride, padding)?;
    let gs = grad_out.shape();
    if gs != [g.n, g.cout, g.ho, g.wo] {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d: output gradient".into(),
            expected: vec![g.n, g.cout, g.ho, g.wo],
            got: gs.to_vec(),
        });
    }
    let (ph, pw) = padding.extents();
    let circular = matches!(padding, Padding::Circular(..));
    let mut grad_in = Tensor::zeros(input_shape);
    let go = grad_out.data();
    let k = kernel.data();
    let gi = grad_in.data_mut();
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    for n in 0..g.n {
        for co in 0..g.cout {
            for i in 0..g.ho {
                for j in 0..g.wo {
                    let gval = go[(n * g.cout + co) * out_plane + i * g.wo + j];
                    for ci in 0..g.cin {
                        let x_base = (n * g.cin + ci) * in_plane;
                        let k_base = ((co * g.cin + ci) * g.kh) * g.kw;
                        for u in 0..g.kh {
                            let y = (i * stride.0 + u) as isize - ph as isize;
                            let Some(y) = resolve_index(y, g.h, circular) else {
                                continue;
                            };
                            for v in 0..g.kw {
                                let xx = (j * stride.1 + v) as isize - pw as isize;
                                let Some(xx) = resolve_index(xx, g.w, circular) else {
                                    continue;
                                };
                                gi[x_base + y * g.w + xx] += k[k_base + u * g.kw + v] * gval;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

pub fn conv2d_backward_kernel<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel_shape: &[usize],
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>, TensorError> {
    let probe = Tensor::<T>::zeros(kernel_shape);
    let g = check_geometry(input, &probe, None, stride, padding)?;
    let (ph, pw) = padding.extents();
    let circular = matches!(padding, Padding::Circular(..));
    let mut grad_k = Tensor::zeros(kernel_shape);
    let go = grad_out.data();
    let x = input.data();
    let gk = grad_k.data_mut();
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    for n in 0..g.n {
        for co in 0..g.cout {
            for i in 0..g.ho {
                for j in 0..g.wo {
                    let gval = go[(n * g.cout + co) * out_plane + i * g.wo + j];
                    for ci in 0..g.cin {
                        let x_base = (n * g.cin + ci) * in_plane;
                        let k_base = ((co * g.cin + ci) * g.kh) * g.kw;
                        for u in 0..g.kh {
                            let y = (i * stride.0 + u) as isize - ph as isize;
                            let Some(y) = resolve_index(y, g.h, circular) else {
                                continue;
                            };
                            for v in 0..g.kw {
                                let xx = (j * stride.1 + v) as isize - pw as isize;
                                let Some(xx) = resolve_index(xx, g.w, circular) else {
                                    continue;
                                };
                                gk[k_base + u * g.kw + v] += x[x_base + y * g.w + xx] * gval;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_k)
}

pub fn conv2d_backward_bias<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let (n, cout, plane) = (s[0], s[1], s[2] * s[3]);
    let mut db = Tensor::zeros(&[cout]);
    for b in 0..n {
        for co in 0..cout {
            let base = (b * cout + co) * plane;
            let sum: T = grad_out.data()[base..base + plane].iter().copied().sum();
            db.data_mut()[co] += sum;
        }
    }
    db
}


#[cfg(test)]
mod tests {
    use super::oracle::conv_oracle;
    use super::*;
    use crate::util::{gaussian_tensor, rng_from_seed};

    #[test]
    fn one_by_one_is_scalar_multiply() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![2.0f64]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![3.0f64]).unwrap();
        let y = conv2d(&x, &k, None, (1, 1), Padding::Zero(0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn zero_input_gives_constant_bias_planes() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let mut rng = rng_from_seed(3);
        let k = gaussian_tensor::<f64>(&[3, 2, 3, 3], &mut rng);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &k, Some(&b), (1, 1), Padding::Zero(1, 1)).unwrap();
        for co in 0..3 {
            for p in 0..16 {
                assert_eq!(y.data()[co * 16 + p], b.data()[co]);
            }
        }
    }

    #[test]
    fn ramp_input_averaging_kernel_matches_oracle() {
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let k = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let got = conv2d(&x, &k, None, (1, 1), Padding::Zero(1, 1)).unwrap();
        // Window sums computed by the sliding-window oracle, frozen here.
        let sums = [
            10.0, 18.0, 24.0, 18.0, 27.0, 45.0, 54.0, 39.0, 51.0, 81.0, 90.0, 63.0, 42.0, 66.0,
            72.0, 50.0,
        ];
        for (g, s) in got.data().iter().zip(sums) {
            assert!((g - s / 9.0).abs() < 1e-12);
        }
        let oracle = conv_oracle(&x, &k, None, (1, 1), Padding::Zero(1, 1));
        assert_eq!(got, oracle);
    }

    #[test]
    fn matches_oracle_on_random_geometries() {
        let mut rng = rng_from_seed(11);
        let cases = [
            (1, 1, 5, 5, 2, 3, 3, (1, 1), Padding::Zero(1, 1)),
            (2, 3, 6, 5, 4, 3, 2, (1, 1), Padding::Zero(0, 0)),
            (1, 2, 8, 8, 3, 3, 3, (2, 2), Padding::Zero(1, 1)),
            (1, 1, 6, 6, 1, 3, 3, (1, 1), Padding::Circular(1, 1)),
            (2, 2, 5, 7, 3, 2, 4, (2, 1), Padding::Circular(2, 2)),
        ];
        for (n, cin, h, w, cout, kh, kw, stride, pad) in cases {
            let x = gaussian_tensor::<f64>(&[n, cin, h, w], &mut rng);
            let k = gaussian_tensor::<f64>(&[cout, cin, kh, kw], &mut rng);
            let b = gaussian_tensor::<f64>(&[cout], &mut rng);
            let got = conv2d(&x, &k, Some(&b), stride, pad).unwrap();
            let want = conv_oracle(&x, &k, Some(&b), stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12, "mismatch under {pad:?}");
            }
        }
    }

    #[test]
    fn backward_input_is_adjoint() {
        let mut rng = rng_from_seed(5);
        for (stride, pad) in [
            ((1, 1), Padding::Zero(1, 1)),
            ((2, 2), Padding::Zero(0, 0)),
            ((1, 1), Padding::Circular(1, 1)),
            ((2, 1), Padding::Circular(1, 2)),
        ] {
            let k = gaussian_tensor::<f64>(&[3, 2, 3, 3], &mut rng);
            let x = gaussian_tensor::<f64>(&[1, 2, 6, 6], &mut rng);
            let ax = conv2d(&x, &k, None, stride, pad).unwrap();
            let y = gaussian_tensor::<f64>(ax.shape(), &mut rng);
            let aty = conv2d_backward_input(&y, &k, x.shape(), stride, pad).unwrap();
            let lhs = ax.dot(&y).unwrap();
            let rhs = x.dot(&aty).unwrap();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * (lhs.abs() + rhs.abs() + 1.0),
                "adjoint identity failed for {stride:?} {pad:?}"
            );
        }
    }

    #[test]
    fn backward_kernel_matches_directional_probe() {
        // <conv(x; K), G> is linear in K, so it must equal <K, dK(x, G)>.
        let mut rng = rng_from_seed(9);
        let x = gaussian_tensor::<f64>(&[2, 2, 5, 5], &mut rng);
        let k = gaussian_tensor::<f64>(&[3, 2, 3, 3], &mut rng);
        let y = conv2d(&x, &k, None, (1, 1), Padding::Zero(1, 1)).unwrap();
        let g = gaussian_tensor::<f64>(y.shape(), &mut rng);
        let dk = conv2d_backward_kernel(&g, &x, k.shape(), (1, 1), Padding::Zero(1, 1)).unwrap();
        let lhs = y.dot(&g).unwrap();
        let rhs = k.dot(&dk).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * (lhs.abs() + 1.0));
    }

    #[test]
    fn oversized_kernel_is_dimension_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let k = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        let err = conv2d(&x, &k, None, (1, 1), Padding::Zero(0, 0)).unwrap_err();
        assert!(matches!(err, TensorError::InvalidDimension(_)));
    }
}
