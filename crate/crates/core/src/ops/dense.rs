//! Fully connected layer: `y = x W^T + b` on `[N, D]` inputs.

use super::expect_rank;
use crate::tensor::{Scalar, Tensor, TensorError};

pub fn fully_connected<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>, TensorError> {
    expect_rank(input, 2, "fully_connected input")?;
    expect_rank(weight, 2, "fully_connected weight")?;
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let (k, wd) = (weight.shape()[0], weight.shape()[1]);
    if wd != d {
        return Err(TensorError::ShapeMismatch {
            context: "fully_connected: weight columns".into(),
            expected: vec![d],
            got: vec![wd],
        });
    }
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(TensorError::ShapeMismatch {
                context: "fully_connected: bias".into(),
                expected: vec![k],
                got: b.shape().to_vec(),
            });
        }
    }
    let mut out = Tensor::zeros(&[n, k]);
    for row in 0..n {
        let x = &input.data()[row * d..(row + 1) * d];
        for j in 0..k {
            let w = &weight.data()[j * d..(j + 1) * d];
            let mut acc = bias.map_or(T::ZERO, |b| b.data()[j]);
            for i in 0..d {
                acc += w[i] * x[i];
            }
            out.data_mut()[row * k + j] = acc;
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn fully_connected_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let k = weight.shape()[0];
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = Tensor::zeros(&[k]);
    for row in 0..n {
        for j in 0..k {
            let g = grad_out.data()[row * k + j];
            grad_b.data_mut()[j] += g;
            for i in 0..d {
                grad_in.data_mut()[row * d + i] += g * weight.data()[j * d + i];
                grad_w.data_mut()[j * d + i] += g * input.data()[row * d + i];
            }
        }
    }
    (grad_in, grad_w, grad_b)
}
