//! Forward kernels for the supported layer vocabulary and their exact
//! adjoints / vector-Jacobian products.
//!
//! Everything here is pure: functions take tensors, return tensors. The tape
//! records these kernels; the linear-layer views reuse the same code so that
//! "the attacked operator" and "the inference operator" are one and the same.

mod conv;
mod dense;
mod loss;
mod norm;
mod pool;

pub use conv::{
    conv2d, conv2d_backward_bias, conv2d_backward_input, conv2d_backward_kernel, conv_output_dims,
};
#[cfg(test)]
pub(crate) use conv::oracle::conv_oracle;
pub use dense::{fully_connected, fully_connected_backward};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_backward, softmax_probs};
pub use norm::{batch_statistics, batchnorm_inference, batchnorm_inference_backward};
pub(crate) use norm::bn_scales;

/// Validates batch-normalization parameters against a channel count.
pub fn batchnorm_check<T: crate::tensor::Scalar>(
    channels: usize,
    gamma: &crate::tensor::Tensor<T>,
    beta: &crate::tensor::Tensor<T>,
    moving_mean: &crate::tensor::Tensor<T>,
    moving_var: &crate::tensor::Tensor<T>,
    eps: f64,
) -> Result<(), crate::tensor::TensorError> {
    norm::check_bn_params(channels, gamma, beta, moving_mean, moving_var, eps)
}
pub use pool::{avgpool2d, avgpool2d_backward, maxpool2d, maxpool2d_backward};

use crate::tensor::{Scalar, Tensor, TensorError};

/// Spatial padding applied before a convolution window slides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Pad `h`/`w` zeros on each spatial border.
    Zero(usize, usize),
    /// Wrap around spatially (torus indexing) with `h`/`w` margin.
    Circular(usize, usize),
}

impl Padding {
    pub fn extents(self) -> (usize, usize) {
        match self {
            Padding::Zero(h, w) | Padding::Circular(h, w) => (h, w),
        }
    }
}

pub(crate) fn expect_rank<T: Scalar>(
    t: &Tensor<T>,
    rank: usize,
    context: &str,
) -> Result<(), TensorError> {
    if t.shape().len() != rank {
        return Err(TensorError::ShapeMismatch {
            context: format!("{context}: expected rank {rank}"),
            expected: vec![rank],
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// ReLU, the subgradient at 0 is taken as 0.
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    input
        .zip_map(grad_out, |x, g| if x > T::ZERO { g } else { T::ZERO })
        .expect("relu grad shape matches forward")
}

/// Elementwise sum of same-shape tensors (residual shortcut).
pub fn residual_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    a.add(b)
}

/// Concatenates `[N,C_i,H,W]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    if parts.len() < 2 {
        return Err(TensorError::InvalidParameter(
            "concat needs at least two inputs".into(),
        ));
    }
    for p in parts {
        expect_rank(p, 4, "concat")?;
    }
    let (n, h, w) = {
        let s = parts[0].shape();
        (s[0], s[2], s[3])
    };
    let mut total_c = 0;
    for p in parts {
        let s = p.shape();
        if s[0] != n || s[2] != h || s[3] != w {
            return Err(TensorError::ShapeMismatch {
                context: "concat: batch/spatial dims must agree".into(),
                expected: parts[0].shape().to_vec(),
                got: s.to_vec(),
            });
        }
        total_c += s[1];
    }
    let mut out = Tensor::zeros(&[n, total_c, h, w]);
    let plane = h * w;
    for b in 0..n {
        let mut c_off = 0;
        for p in parts {
            let c = p.shape()[1];
            let src = &p.data()[b * c * plane..(b + 1) * c * plane];
            let dst_start = b * total_c * plane + c_off * plane;
            out.data_mut()[dst_start..dst_start + c * plane].copy_from_slice(src);
            c_off += c;
        }
    }
    Ok(out)
}

/// Splits a concat gradient back into per-part gradients.
pub fn concat_channels_backward<T: Scalar>(
    part_shapes: &[Vec<usize>],
    grad_out: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let s = grad_out.shape();
    let (n, total_c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let mut grads: Vec<Tensor<T>> = part_shapes.iter().map(|s| Tensor::zeros(s)).collect();
    for b in 0..n {
        let mut c_off = 0;
        for (part, shape) in grads.iter_mut().zip(part_shapes) {
            let c = shape[1];
            let src_start = b * total_c * plane + c_off * plane;
            let dst_start = b * c * plane;
            part.data_mut()[dst_start..dst_start + c * plane]
                .copy_from_slice(&grad_out.data()[src_start..src_start + c * plane]);
            c_off += c;
        }
    }
    grads
}
