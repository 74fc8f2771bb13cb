//! Linear layers as explicit operators.
//!
//! [`LinearLayerView`] exposes one linear layer of a model as a matrix-free
//! operator with `apply` and `adjoint`, bias excluded (a constant shift does
//! not change how a perturbation propagates). Small operators can also be
//! materialized densely — doubly-block Toeplitz for zero-padded convolution,
//! doubly-block circulant for circular padding, diagonal for batch
//! normalization — which serves as the oracle side of the spectral checks.
//! The dense builders construct matrices by direct index placement of kernel
//! coefficients, sharing no code with the sliding-window kernels they are
//! checked against.

use thiserror::Error;

use crate::model::{ModelGraph, NodeKind};
use crate::ops::{self, Padding};
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::util::{random_unit_tensor, rng_from_seed};

/// Default element cap for dense materialization (2^26 scalars = 512 MiB f64).
pub const DEFAULT_DENSE_ELEMENT_CAP: usize = 1 << 26;

#[derive(Debug, Error)]
pub enum LinopsError {
    #[error("layer '{0}' not found in model")]
    UnknownLayer(String),
    #[error("layer '{0}' is not a linear layer")]
    NotLinear(String),
    #[error("dense operator {rows}x{cols} exceeds element cap {cap}")]
    MemoryCap { rows: usize, cols: usize, cap: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

enum OperatorKernel<T: Scalar> {
    Conv {
        kernel: Tensor<T>,
        stride: (usize, usize),
        padding: Padding,
    },
    /// Per-channel diagonal scale `gamma_c / sqrt(v_c + eps)`.
    ChannelScale { scales: Vec<T> },
    Dense { weight: Tensor<T> },
}

/// Matrix-free view of one linear layer at its resolved geometry, bias
/// excluded. `apply` maps input-geometry tensors to output-geometry tensors;
/// `adjoint` is the exact transpose.
pub struct LinearLayerView<T: Scalar> {
    pub layer_id: String,
    pub in_geometry: Vec<usize>,
    pub out_geometry: Vec<usize>,
    kernel: OperatorKernel<T>,
}

impl<T: Scalar> LinearLayerView<T> {
    pub fn in_dim(&self) -> usize {
        self.in_geometry.iter().product()
    }

    pub fn out_dim(&self) -> usize {
        self.out_geometry.iter().product()
    }

    fn check_shape(&self, t: &Tensor<T>, geometry: &[usize], what: &str) -> Result<(), TensorError> {
        if t.shape() != geometry {
            return Err(TensorError::ShapeMismatch {
                context: format!("{what} of layer {}", self.layer_id),
                expected: geometry.to_vec(),
                got: t.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.check_shape(x, &self.in_geometry, "apply input")?;
        match &self.kernel {
            OperatorKernel::Conv {
                kernel,
                stride,
                padding,
            } => {
                let mut batched = vec![1];
                batched.extend_from_slice(&self.in_geometry);
                let out = ops::conv2d(&x.reshape(&batched)?, kernel, None, *stride, *padding)?;
                out.reshape(&self.out_geometry)
            }
            OperatorKernel::ChannelScale { scales } => {
                let (h, w) = (self.in_geometry[1], self.in_geometry[2]);
                let plane = h * w;
                let mut out = x.clone();
                for (c, &s) in scales.iter().enumerate() {
                    for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
                        *v = *v * s;
                    }
                }
                Ok(out)
            }
            OperatorKernel::Dense { weight } => {
                let out = ops::fully_connected(&x.reshape(&[1, self.in_dim()])?, weight, None)?;
                out.reshape(&self.out_geometry)
            }
        }
    }

    pub fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.check_shape(y, &self.out_geometry, "adjoint input")?;
        match &self.kernel {
            OperatorKernel::Conv {
                kernel,
                stride,
                padding,
            } => {
                let mut batched_out = vec![1];
                batched_out.extend_from_slice(&self.out_geometry);
                let mut batched_in = vec![1];
                batched_in.extend_from_slice(&self.in_geometry);
                let grad = ops::conv2d_backward_input(
                    &y.reshape(&batched_out)?,
                    kernel,
                    &batched_in,
                    *stride,
                    *padding,
                )?;
                grad.reshape(&self.in_geometry)
            }
            OperatorKernel::ChannelScale { .. } => self.apply(y), // diagonal: self-adjoint
            OperatorKernel::Dense { weight } => {
                let (k, d) = (weight.shape()[0], weight.shape()[1]);
                let mut out = Tensor::zeros(&[d]);
                for row in 0..k {
                    let g = y.data()[row];
                    for col in 0..d {
                        out.data_mut()[col] += weight.data()[row * d + col] * g;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Extracts the matrix-free operator of one linear layer.
pub fn view_linear_layer<T: Scalar>(
    model: &ModelGraph<T>,
    layer_id: &str,
) -> Result<LinearLayerView<T>, LinopsError> {
    let node = model
        .node(layer_id)
        .ok_or_else(|| LinopsError::UnknownLayer(layer_id.to_string()))?;
    let kernel = match &node.kind {
        NodeKind::Conv2d {
            kernel,
            stride,
            padding,
            ..
        } => OperatorKernel::Conv {
            kernel: kernel.clone(),
            stride: *stride,
            padding: *padding,
        },
        NodeKind::BatchNorm {
            gamma,
            moving_var,
            eps,
            ..
        } => OperatorKernel::ChannelScale {
            scales: ops::bn_scales(gamma, moving_var, *eps),
        },
        NodeKind::FullyConnected { weight, .. } => OperatorKernel::Dense {
            weight: weight.clone(),
        },
        _ => return Err(LinopsError::NotLinear(layer_id.to_string())),
    };
    Ok(LinearLayerView {
        layer_id: layer_id.to_string(),
        in_geometry: node.in_shapes[0].clone(),
        out_geometry: node.out_shape.clone(),
        kernel,
    })
}

/// Views for every layer in `linear_layer_order`, in order.
pub fn all_linear_views<T: Scalar>(
    model: &ModelGraph<T>,
) -> Result<Vec<LinearLayerView<T>>, LinopsError> {
    model
        .linear_layer_order()
        .iter()
        .map(|id| view_linear_layer(model, id))
        .collect()
}

/// Dense `rows x cols` matrix realizing a linear operator on flattened
/// (row-major) input vectors.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl DenseOperator {
    fn zeroed(rows: usize, cols: usize, cap: usize) -> Result<Self, LinopsError> {
        if rows.saturating_mul(cols) > cap {
            return Err(LinopsError::MemoryCap { rows, cols, cap });
        }
        Ok(DenseOperator {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec length");
        let mut out = vec![0.0; self.rows];
        for (r, out_v) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *out_v = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        out
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    /// `[rows, cols]` tensor for NTSR1 dumps.
    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.rows, self.cols], self.data.clone()).expect("dims agree")
    }
}

/// Doubly-block circulant matrix of a circular same-size convolution
/// (stride 1, anchor at the kernel center). Row `(co,i,j)`, column
/// `(ci,y,x)` accumulates `K[co,ci,u,v]` whenever the wrapped window
/// position `(i+u-ph, j+v-pw) mod (H,W)` hits `(y,x)`.
pub fn materialize_conv_circulant(
    kernel: &Tensor<f64>,
    in_geometry: &[usize],
    cap: usize,
) -> Result<DenseOperator, LinopsError> {
    let ks = kernel.shape();
    if ks.len() != 4 || in_geometry.len() != 3 {
        return Err(TensorError::InvalidDimension(
            "circulant: kernel [Co,Ci,kh,kw], geometry [C,H,W]".into(),
        )
        .into());
    }
    let (cout, cin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let (c, h, w) = (in_geometry[0], in_geometry[1], in_geometry[2]);
    if cin != c {
        return Err(TensorError::ShapeMismatch {
            context: "circulant: kernel channels".into(),
            expected: vec![c],
            got: vec![cin],
        }
        .into());
    }
    if kh > h || kw > w {
        return Err(TensorError::InvalidDimension(format!(
            "circulant: kernel {kh}x{kw} exceeds geometry {h}x{w}"
        ))
        .into());
    }
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut op = DenseOperator::zeroed(cout * h * w, c * h * w, cap)?;
    for co in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let row = (co * h + i) * w + j;
                for ci in 0..cin {
                    for u in 0..kh {
                        let y = (i + u + h - ph) % h;
                        for v in 0..kw {
                            let x = (j + v + w - pw) % w;
                            let col = (ci * h + y) * w + x;
                            op.data[row * op.cols + col] +=
                                kernel.data()[((co * cin + ci) * kh + u) * kw + v];
                        }
                    }
                }
            }
        }
    }
    Ok(op)
}

/// Doubly-block Toeplitz matrix of a zero-padded strided convolution, the
/// actual inference operator. Entry `((co,i,j),(ci,y,x)) = K[co,ci,
/// y-(i*sh-ph), x-(j*sw-pw)]` when that offset lies inside the kernel.
pub fn materialize_conv_toeplitz(
    kernel: &Tensor<f64>,
    in_geometry: &[usize],
    zero_padding: (usize, usize),
    stride: (usize, usize),
    cap: usize,
) -> Result<DenseOperator, LinopsError> {
    let ks = kernel.shape();
    if ks.len() != 4 || in_geometry.len() != 3 {
        return Err(TensorError::InvalidDimension(
            "toeplitz: kernel [Co,Ci,kh,kw], geometry [C,H,W]".into(),
        )
        .into());
    }
    let (cout, cin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let (c, h, w) = (in_geometry[0], in_geometry[1], in_geometry[2]);
    if cin != c {
        return Err(TensorError::ShapeMismatch {
            context: "toeplitz: kernel channels".into(),
            expected: vec![c],
            got: vec![cin],
        }
        .into());
    }
    let (ho, wo) = ops::conv_output_dims(
        (h, w),
        (kh, kw),
        stride,
        Padding::Zero(zero_padding.0, zero_padding.1),
    )?;
    let mut op = DenseOperator::zeroed(cout * ho * wo, c * h * w, cap)?;
    for co in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let row = (co * ho + i) * wo + j;
                for ci in 0..cin {
                    for y in 0..h {
                        let u = y as isize - (i * stride.0) as isize + zero_padding.0 as isize;
                        if u < 0 || u >= kh as isize {
                            continue;
                        }
                        for x in 0..w {
                            let v =
                                x as isize - (j * stride.1) as isize + zero_padding.1 as isize;
                            if v < 0 || v >= kw as isize {
                                continue;
                            }
                            let col = (ci * h + y) * w + x;
                            op.data[row * op.cols + col] = kernel.data()
                                [((co * cin + ci) * kh + u as usize) * kw + v as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(op)
}

/// Diagonal matrix of an inference-mode batch normalization over a `[C,H,W]`
/// geometry: `A_ii = gamma_c / sqrt(v_c + eps)` with `c = floor(i / (H*W))`.
/// The per-element shift `b_i = beta_c - mu_c * gamma_c / sqrt(v_c + eps)` is
/// returned separately and is not part of the operator.
pub fn batchnorm_diagonal(
    gamma: &Tensor<f64>,
    beta: &Tensor<f64>,
    moving_mean: &Tensor<f64>,
    moving_var: &Tensor<f64>,
    eps: f64,
    geometry: &[usize],
    cap: usize,
) -> Result<(DenseOperator, Tensor<f64>), LinopsError> {
    if geometry.len() != 3 {
        return Err(
            TensorError::InvalidDimension("batchnorm geometry must be [C,H,W]".into()).into(),
        );
    }
    let (c, plane) = (geometry[0], geometry[1] * geometry[2]);
    ops::batchnorm_check(c, gamma, beta, moving_mean, moving_var, eps)?;
    let dim = c * plane;
    let mut op = DenseOperator::zeroed(dim, dim, cap)?;
    let mut bias = Tensor::zeros(&[dim]);
    for i in 0..dim {
        let ch = i / plane;
        let scale = gamma.data()[ch] / (moving_var.data()[ch] + eps).sqrt();
        op.data[i * dim + i] = scale;
        bias.data_mut()[i] = beta.data()[ch] - moving_mean.data()[ch] * scale;
    }
    Ok((op, bias))
}

/// Dense matrix of a view's operator, built without calling `apply`.
pub fn materialize_view(
    view: &LinearLayerView<f64>,
    cap: usize,
) -> Result<DenseOperator, LinopsError> {
    match &view.kernel {
        OperatorKernel::Conv {
            kernel,
            stride,
            padding,
        } => match padding {
            Padding::Zero(ph, pw) => {
                materialize_conv_toeplitz(kernel, &view.in_geometry, (*ph, *pw), *stride, cap)
            }
            Padding::Circular(..) => {
                // Fixture models use stride-1 centered circular convolution,
                // which is exactly the doubly-block circulant form.
                materialize_conv_circulant(kernel, &view.in_geometry, cap)
            }
        },
        OperatorKernel::ChannelScale { scales } => {
            let plane = view.in_geometry[1] * view.in_geometry[2];
            let dim = view.in_dim();
            let mut op = DenseOperator::zeroed(dim, dim, cap)?;
            for i in 0..dim {
                op.data[i * dim + i] = scales[i / plane].to_f64();
            }
            Ok(op)
        }
        OperatorKernel::Dense { weight } => {
            let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
            let mut op = DenseOperator::zeroed(rows, cols, cap)?;
            for (dst, src) in op.data.iter_mut().zip(weight.data()) {
                *dst = src.to_f64();
            }
            Ok(op)
        }
    }
}

/// Max normalized adjoint defect `|<Ax,y> - <x,A^T y>| / (|Ax| |y|)` over
/// random pairs; the generic form lets tests feed a deliberately wrong
/// adjoint as a negative control.
pub fn adjoint_defect<FA, FT>(
    apply: FA,
    adjoint: FT,
    in_geometry: &[usize],
    out_geometry: &[usize],
    trials: usize,
    seed: u64,
) -> f64
where
    FA: Fn(&Tensor<f64>) -> Tensor<f64>,
    FT: Fn(&Tensor<f64>) -> Tensor<f64>,
{
    assert!(trials >= 1, "adjoint check needs at least one trial");
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x: Tensor<f64> = random_unit_tensor(in_geometry, &mut rng);
        let y: Tensor<f64> = random_unit_tensor(out_geometry, &mut rng);
        let ax = apply(&x);
        let aty = adjoint(&y);
        let lhs = ax.dot(&y).expect("geometry");
        let rhs = x.dot(&aty).expect("geometry");
        let denom = (ax.l2_norm() * y.l2_norm()).max(1e-300);
        worst = worst.max((lhs - rhs).abs() / denom);
    }
    worst
}

/// Adjoint identity diagnostic for a layer view; must be <= 1e-8 at f64.
pub fn adjoint_check(view: &LinearLayerView<f64>, trials: usize, seed: u64) -> f64 {
    adjoint_defect(
        |x| view.apply(x).expect("geometry fixed"),
        |y| view.adjoint(y).expect("geometry fixed"),
        &view.in_geometry,
        &view.out_geometry,
        trials,
        seed,
    )
}
