//! Inference-mode batch normalization: a per-channel affine map.
//!
//! With moving statistics fixed, `y = gamma_c (x - mu_c) / sqrt(v_c + eps)
//! + beta_c` is linear in `x`; the linear part (the diagonal scale) is what
//! the spectral machinery attacks, the shift is carried separately.

use super::expect_rank;
use crate::tensor::{Scalar, Tensor, TensorError};

pub(crate) fn check_bn_params<T: Scalar>(
    channels: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    moving_mean: &Tensor<T>,
    moving_var: &Tensor<T>,
    eps: f64,
) -> Result<(), TensorError> {
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("moving_mean", moving_mean),
        ("moving_var", moving_var),
    ] {
        if t.shape() != [channels] {
            return Err(TensorError::ShapeMismatch {
                context: format!("batchnorm {name}"),
                expected: vec![channels],
                got: t.shape().to_vec(),
            });
        }
    }
    if moving_var.data().iter().any(|&v| v < T::ZERO) {
        return Err(TensorError::InvalidParameter(
            "batchnorm moving variance must be nonnegative".into(),
        ));
    }
    if !(eps > 0.0) {
        return Err(TensorError::InvalidParameter(
            "batchnorm eps must be positive".into(),
        ));
    }
    Ok(())
}

/// Per-channel scale factors `gamma_c / sqrt(v_c + eps)`.
pub(crate) fn bn_scales<T: Scalar>(gamma: &Tensor<T>, moving_var: &Tensor<T>, eps: f64) -> Vec<T> {
    gamma
        .data()
        .iter()
        .zip(moving_var.data())
        .map(|(&g, &v)| g / (v + T::from_f64(eps)).sqrt())
        .collect()
}

pub fn batchnorm_inference<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    moving_mean: &Tensor<T>,
    moving_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>, TensorError> {
    expect_rank(input, 4, "batchnorm input")?;
    let s = input.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    check_bn_params(c, gamma, beta, moving_mean, moving_var, eps)?;
    let scales = bn_scales(gamma, moving_var, eps);
    let mut out = input.clone();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let (scale, mean, shift) = (scales[ch], moving_mean.data()[ch], beta.data()[ch]);
            for v in &mut out.data_mut()[base..base + plane] {
                *v = (*v - mean) * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_inference_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    moving_mean: &Tensor<T>,
    moving_var: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let scales = bn_scales(gamma, moving_var, eps);
    let mut grad_in = Tensor::zeros(s);
    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let inv_std = T::ONE / (moving_var.data()[ch] + T::from_f64(eps)).sqrt();
            for p in 0..plane {
                let g = grad_out.data()[base + p];
                grad_in.data_mut()[base + p] = g * scales[ch];
                grad_gamma.data_mut()[ch] +=
                    g * (input.data()[base + p] - moving_mean.data()[ch]) * inv_std;
                grad_beta.data_mut()[ch] += g;
            }
        }
    }
    (grad_in, grad_gamma, grad_beta)
}

/// Per-channel mean and biased variance of a `[N,C,H,W]` batch, used by
/// training-mode normalization and the moving-average update.
pub fn batch_statistics<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let count = T::from_f64((n * plane) as f64);
    let mut mean = Tensor::zeros(&[c]);
    let mut var = Tensor::zeros(&[c]);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for p in 0..plane {
                mean.data_mut()[ch] += input.data()[base + p];
            }
        }
    }
    for m in mean.data_mut() {
        *m = *m / count;
    }
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let m = mean.data()[ch];
            for p in 0..plane {
                let d = input.data()[base + p] - m;
                var.data_mut()[ch] += d * d;
            }
        }
    }
    for v in var.data_mut() {
        *v = *v / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chan1(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn unit_params_and_zero_eps_rejection() {
        // gamma=1, beta=0, mu=0, v=1, eps -> identity requires eps > 0 per
        // contract; use a tiny eps and compare against the closed form.
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.5f64, -1.0]).unwrap();
        let eps = 1e-12;
        let y = batchnorm_inference(&x, &chan1(1.0), &chan1(0.0), &chan1(0.0), &chan1(1.0), eps)
            .unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / (1.0 + eps).sqrt()).abs() < 1e-12);
        }
        assert!(batchnorm_inference(&x, &chan1(1.0), &chan1(0.0), &chan1(0.0), &chan1(1.0), 0.0)
            .is_err());
    }

    #[test]
    fn scale_two_var_three() {
        // gamma=2, beta=0, mu=0, v=3, eps=1e-5, x=1 -> 2/sqrt(3+1e-5)
        let x = Tensor::new(vec![1, 1, 1, 1], vec![1.0f64]).unwrap();
        let y = batchnorm_inference(&x, &chan1(2.0), &chan1(0.0), &chan1(0.0), &chan1(3.0), 1e-5)
            .unwrap();
        let want = 2.0 / (3.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gamma_collapses_to_beta() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![5.0f64, -3.0, 0.0, 9.0]).unwrap();
        let y = batchnorm_inference(&x, &chan1(0.0), &chan1(7.0), &chan1(1.0), &chan1(2.0), 1e-5)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn negative_variance_is_invalid() {
        let x = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let err = batchnorm_inference(&x, &chan1(1.0), &chan1(0.0), &chan1(0.0), &chan1(-1.0), 1e-5)
            .unwrap_err();
        assert!(matches!(err, TensorError::InvalidParameter(_)));
    }

    #[test]
    fn backward_matches_affine_structure() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::new(vec![2], vec![2.0f64, 0.5]).unwrap();
        let beta = Tensor::new(vec![2], vec![1.0f64, -1.0]).unwrap();
        let mean = Tensor::new(vec![2], vec![0.5f64, 1.5]).unwrap();
        let var = Tensor::new(vec![2], vec![4.0f64, 1.0]).unwrap();
        let g = Tensor::full(&[1, 2, 1, 2], 1.0f64);
        let (gi, gg, gb) = batchnorm_inference_backward(&g, &x, &gamma, &mean, &var, 1e-5);
        let scales = bn_scales(&gamma, &var, 1e-5);
        assert!((gi.data()[0] - scales[0]).abs() < 1e-12);
        assert!((gi.data()[2] - scales[1]).abs() < 1e-12);
        assert_eq!(gb.data(), &[2.0, 2.0]);
        // d/dgamma = sum g * (x - mu)/sqrt(v+eps)
        let want0 = ((1.0 - 0.5) + (2.0 - 0.5)) / (4.0f64 + 1e-5).sqrt();
        assert!((gg.data()[0] - want0).abs() < 1e-12);
    }

    #[test]
    fn batch_statistics_match_hand_computation() {
        let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        let (mean, var) = batch_statistics(&x);
        assert_eq!(mean.data(), &[4.0]);
        assert_eq!(var.data(), &[5.0]); // mean((1-4)^2,(3-4)^2,(5-4)^2,(7-4)^2)
    }
}
