//! Softmax cross-entropy over a batch of logits, mean-reduced.

use super::expect_rank;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Row-wise softmax probabilities (numerically stabilized).
pub fn softmax_probs<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    expect_rank(logits, 2, "softmax")?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut probs = logits.clone();
    for row in 0..n {
        let slice = &mut probs.data_mut()[row * k..(row + 1) * k];
        let max = slice.iter().fold(slice[0], |a, &b| a.maximum(b));
        let mut sum = T::ZERO;
        for v in slice.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in slice.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(probs)
}

/// Mean negative log-likelihood of the given labels; also returns the
/// softmax probabilities for reuse in the backward pass.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>), TensorError> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            context: "cross_entropy labels".into(),
            expected: vec![n],
            got: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::InvalidParameter(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax_probs(logits)?;
    let mut loss = T::ZERO;
    for (row, &label) in labels.iter().enumerate() {
        loss -= probs.data()[row * k + label].ln();
    }
    Ok((loss / T::from_f64(n as f64), probs))
}

/// `d loss / d logits = (softmax - onehot) / N`, scaled by the upstream grad.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Tensor<T> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut grad = probs.clone();
    for (row, &label) in labels.iter().enumerate() {
        grad.data_mut()[row * k + label] -= T::ONE;
    }
    for v in grad.data_mut() {
        *v = *v * inv_n * upstream;
    }
    grad
}
