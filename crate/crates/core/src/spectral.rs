//! Top singular pairs of linear layers and the certificates built on them.
//!
//! Two independent routes compute the same quantity: adjoint-based power
//! iteration on the matrix-free view, and a full SVD of the densely
//! materialized operator (nalgebra). Their agreement is part of the
//! acceptance gate. On top of the per-layer values sit two executable
//! checks: the product of operator norms bounds the network's Lipschitz
//! constant (probed with random input pairs), and no direction beats the
//! computed right singular vector (sampled with random unit inputs).

use thiserror::Error;

use crate::linops::{DenseOperator, LinearLayerView, LinopsError};
use crate::model::{ModelError, ModelGraph};
use crate::tensor::{Tensor, TensorError};
use crate::util::{random_unit_tensor, rng_from_seed, subseed, uniform_tensor};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Linops(#[from] LinopsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("singular pairs do not match the model's linear layers: {0}")]
    LayerMismatch(String),
}

/// Top singular value and right singular vector of one layer's operator.
#[derive(Debug, Clone)]
pub struct SingularPair {
    pub layer_id: String,
    pub sigma_max: f64,
    /// Unit-norm direction in the layer's input geometry.
    pub v_max: Tensor<f64>,
    pub iterations: usize,
    /// `||A^T A v - sigma^2 v||_2` at the returned pair.
    pub residual: f64,
    pub converged: bool,
    /// Set when the operator annihilated the iterate (zero operator signal).
    pub degenerate: bool,
}

/// Power iteration on `A^T A` through the view's `apply`/`adjoint`.
///
/// Stops when successive sigma estimates agree to `tol` relatively, or after
/// `max_iters`. The returned `sigma_max` is recomputed as `||A v||` for the
/// final iterate, so `||apply(v_max)|| == sigma_max` holds exactly.
pub fn power_iteration(
    view: &LinearLayerView<f64>,
    tol: f64,
    max_iters: usize,
    seed: u64,
) -> Result<SingularPair, SpectralError> {
    assert!(tol > 0.0, "power iteration tolerance must be positive");
    assert!(max_iters >= 1, "power iteration needs at least one iteration");
    let mut rng = rng_from_seed(seed);
    let mut v: Tensor<f64> = random_unit_tensor(&view.in_geometry, &mut rng);
    let mut sigma_prev = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    for t in 1..=max_iters {
        iterations = t;
        let z = view.apply(&v)?;
        let sigma = z.l2_norm();
        if sigma < 1e-150 {
            // The operator annihilates a generic direction: degenerate.
            return Ok(SingularPair {
                layer_id: view.layer_id.clone(),
                sigma_max: 0.0,
                v_max: v,
                iterations,
                residual: 0.0,
                converged: false,
                degenerate: true,
            });
        }
        let w = view.adjoint(&z)?;
        v = w.scale(1.0 / w.l2_norm());
        if (sigma - sigma_prev).abs() <= tol * sigma {
            converged = true;
            break;
        }
        sigma_prev = sigma;
    }
    // Final consistency: recompute sigma for the returned direction.
    let av = view.apply(&v)?;
    let sigma = av.l2_norm();
    let atav = view.adjoint(&av)?;
    let residual = atav.sub(&v.scale(sigma * sigma))?.l2_norm();
    Ok(SingularPair {
        layer_id: view.layer_id.clone(),
        sigma_max: sigma,
        v_max: v,
        iterations,
        residual,
        converged,
        degenerate: false,
    })
}

/// Exact top singular pair of a dense operator via full SVD (the oracle
/// route). Returns the value and the right singular vector as a flat tensor
/// of length `cols`.
pub fn dense_svd_max(op: &DenseOperator) -> Result<(f64, Tensor<f64>), SpectralError> {
    let svd = op.to_nalgebra().svd(false, true);
    let values = &svd.singular_values;
    let mut best = 0usize;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    let sigma = values[best];
    let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
    let v: Vec<f64> = v_t.row(best).iter().copied().collect();
    Ok((sigma, Tensor::new(vec![op.cols], v)?))
}

/// Outcome of the sampled optimality check for a singular direction.
#[derive(Debug, Clone)]
pub struct MaxDirectionCheck {
    pub layer_id: String,
    pub passed: bool,
    /// Largest observed `||A u|| / ||A v_max||` over random unit `u`.
    pub worst_ratio: f64,
    pub trials: usize,
}

/// Samples random unit directions and checks none is amplified more than
/// `v_max` (up to 1e-6 relative slack).
pub fn verify_max_direction(
    pair: &SingularPair,
    view: &LinearLayerView<f64>,
    trials: usize,
    seed: u64,
) -> Result<MaxDirectionCheck, SpectralError> {
    assert!(trials >= 100, "direction check wants at least 100 trials");
    let reference = view.apply(&pair.v_max)?.l2_norm();
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let u: Tensor<f64> = random_unit_tensor(&view.in_geometry, &mut rng);
        let amplified = view.apply(&u)?.l2_norm();
        if reference > 0.0 {
            worst = worst.max(amplified / reference);
        } else if amplified > 0.0 {
            worst = f64::INFINITY;
        }
    }
    Ok(MaxDirectionCheck {
        layer_id: pair.layer_id.clone(),
        passed: worst <= 1.0 + 1e-6,
        worst_ratio: worst,
        trials,
    })
}

#[derive(Debug, Clone)]
pub struct LipschitzCertificate {
    /// `(layer_id, sigma_max)` in linear-layer order.
    pub per_layer: Vec<(String, f64)>,
    /// Product of the per-layer operator norms.
    pub product_bound: f64,
    /// Largest observed `||f(x)-f(y)|| / ||x-y||` over the probe pairs.
    pub probe_max: f64,
    pub probe_count: usize,
}

/// Builds the product upper bound from per-layer singular values and probes
/// it with random input pairs `(x, x + eps u)` for `eps` in {1e-3, 1e-1, 1}.
pub fn lipschitz_product_bound(
    model: &ModelGraph<f64>,
    pairs: &[SingularPair],
    probe_count: usize,
    seed: u64,
) -> Result<LipschitzCertificate, SpectralError> {
    let order = model.linear_layer_order();
    if pairs.len() != order.len()
        || pairs.iter().zip(order).any(|(p, id)| &p.layer_id != id)
    {
        return Err(SpectralError::LayerMismatch(format!(
            "expected pairs for {order:?}"
        )));
    }
    let per_layer: Vec<(String, f64)> = pairs
        .iter()
        .map(|p| (p.layer_id.clone(), p.sigma_max))
        .collect();
    let product_bound: f64 = per_layer.iter().map(|(_, s)| s).product();

    const EPSILONS: [f64; 3] = [1e-3, 1e-1, 1.0];
    let mut probe_max = 0.0f64;
    for i in 0..probe_count {
        let mut rng = rng_from_seed(subseed(seed, "lipschitz-probe", i as u64));
        let eps = EPSILONS[i % EPSILONS.len()];
        let x: Tensor<f64> = uniform_tensor(model.input_shape(), 0.0, 1.0, &mut rng);
        let u: Tensor<f64> = random_unit_tensor(model.input_shape(), &mut rng);
        let y = x.add(&u.scale(eps))?;
        let fx = model.forward(&x)?.logits;
        let fy = model.forward(&y)?.logits;
        let ratio = fx.sub(&fy)?.l2_norm() / eps;
        probe_max = probe_max.max(ratio);
    }
    Ok(LipschitzCertificate {
        per_layer,
        product_bound,
        probe_max,
        probe_count,
    })
}

/// Power-iterates every linear layer of a model with per-layer derived
/// seeds. `count` limits the run to the first `count` layers when given.
pub fn compute_singular_pairs(
    model: &ModelGraph<f64>,
    count: Option<usize>,
    tol: f64,
    max_iters: usize,
    seed: u64,
) -> Result<Vec<SingularPair>, SpectralError> {
    let order = model.linear_layer_order();
    let take = count.unwrap_or(order.len()).min(order.len());
    order[..take]
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let view = crate::linops::view_linear_layer(model, id)?;
            power_iteration(&view, tol, max_iters, subseed(seed, "spectral", k as u64))
        })
        .collect()
}

/// Spectral defaults: tolerance and iteration budget for power iteration.
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 500;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{
        materialize_conv_toeplitz, materialize_view, view_linear_layer, DEFAULT_DENSE_ELEMENT_CAP,
    };
    use crate::model::NodeKind;
    use crate::ops::Padding;
    use crate::util::gaussian_tensor;

    /// Dense view over an arbitrary matrix, for operator-level tests.
    fn dense_view(weight: Tensor<f64>) -> LinearLayerView<f64> {
        let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
        let nodes = vec![
            (
                "flat".to_string(),
                NodeKind::<f64>::Flatten,
                vec!["input".to_string()],
            ),
            (
                "fc".to_string(),
                NodeKind::FullyConnected {
                    weight,
                    bias: None,
                },
                vec!["flat".to_string()],
            ),
        ];
        let model = ModelGraph::new(nodes, vec![cols], rows).unwrap();
        view_linear_layer(&model, "fc").unwrap()
    }

    fn diag_view(scales: &[f64]) -> LinearLayerView<f64> {
        let n = scales.len();
        let mut weight = Tensor::<f64>::zeros(&[n, n]);
        for (i, &s) in scales.iter().enumerate() {
            weight.data_mut()[i * n + i] = s;
        }
        dense_view(weight)
    }

    #[test]
    fn identity_operator_converges_immediately() {
        let view = diag_view(&[1.0, 1.0, 1.0]);
        let pair = power_iteration(&view, 1e-9, 100, 7).unwrap();
        assert!(pair.converged);
        assert!(pair.iterations <= 2);
        assert!((pair.sigma_max - 1.0).abs() < 1e-12);
        assert!((pair.v_max.l2_norm() - 1.0).abs() < 1e-10);
        assert!(pair.residual < 1e-10);
    }

    #[test]
    fn dominant_diagonal_direction_is_found() {
        let view = diag_view(&[3.0, 1.0]);
        let pair = power_iteration(&view, 1e-12, 500, 3).unwrap();
        assert!((pair.sigma_max - 3.0).abs() < 1e-9);
        assert!(pair.v_max.data()[0].abs() > 1.0 - 1e-9);
        assert!(pair.v_max.data()[1].abs() < 1e-4);
    }

    #[test]
    fn zero_operator_is_a_degenerate_signal_not_a_crash() {
        let view = diag_view(&[0.0, 0.0]);
        let pair = power_iteration(&view, 1e-6, 50, 5).unwrap();
        assert!(pair.degenerate);
        assert_eq!(pair.sigma_max, 0.0);
        assert!(!pair.converged);
    }

    #[test]
    fn conv_sigma_matches_dense_svd_oracle() {
        let mut rng = rng_from_seed(11);
        let kernel = gaussian_tensor::<f64>(&[2, 1, 3, 3], &mut rng);
        let nodes = vec![
            (
                "conv".to_string(),
                NodeKind::Conv2d {
                    kernel: kernel.clone(),
                    bias: None,
                    stride: (1, 1),
                    padding: Padding::Zero(1, 1),
                },
                vec!["input".to_string()],
            ),
            ("flat".to_string(), NodeKind::Flatten, vec!["conv".to_string()]),
            (
                "fc".to_string(),
                NodeKind::FullyConnected {
                    weight: Tensor::full(&[2, 2 * 64], 0.1),
                    bias: None,
                },
                vec!["flat".to_string()],
            ),
        ];
        let model = ModelGraph::new(nodes, vec![1, 8, 8], 2).unwrap();
        let view = view_linear_layer(&model, "conv").unwrap();
        let pair = power_iteration(&view, 1e-10, 2000, 42).unwrap();
        let dense =
            materialize_conv_toeplitz(&kernel, &[1, 8, 8], (1, 1), (1, 1), DEFAULT_DENSE_ELEMENT_CAP)
                .unwrap();
        let (sigma_oracle, _) = dense_svd_max(&dense).unwrap();
        let rel = (pair.sigma_max - sigma_oracle).abs() / sigma_oracle;
        assert!(rel <= 1e-4, "power {} vs dense {}", pair.sigma_max, sigma_oracle);
    }

    #[test]
    fn dense_svd_identity_and_rank_one() {
        let eye = diag_view(&[1.0, 1.0, 1.0]);
        let op = materialize_view(&eye, DEFAULT_DENSE_ELEMENT_CAP).unwrap();
        let (sigma, v) = dense_svd_max(&op).unwrap();
        assert!((sigma - 1.0).abs() < 1e-12);
        assert!((v.l2_norm() - 1.0).abs() < 1e-12);

        // Rank-1 outer product u w^T with ||u||=2, ||w||=1: sigma = 2.
        let u = [2.0 * (0.6f64), 2.0 * 0.8]; // ||u|| = 2
        let w = [1.0 / 3.0f64.sqrt(); 3]; // ||w|| = 1
        let mut m = Tensor::<f64>::zeros(&[2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                m.data_mut()[i * 3 + j] = u[i] * w[j];
            }
        }
        let op = materialize_view(&dense_view(m), DEFAULT_DENSE_ELEMENT_CAP).unwrap();
        let (sigma, v) = dense_svd_max(&op).unwrap();
        assert!((sigma - 2.0).abs() < 1e-12);
        for (a, b) in v.data().iter().zip(w) {
            assert!((a.abs() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn power_iteration_and_dense_svd_cross_check_on_random_matrix() {
        let mut rng = rng_from_seed(13);
        let m = gaussian_tensor::<f64>(&[50, 30], &mut rng);
        let view = dense_view(m);
        let pair = power_iteration(&view, 1e-12, 5000, 1).unwrap();
        let op = materialize_view(&view, DEFAULT_DENSE_ELEMENT_CAP).unwrap();
        let (sigma, _) = dense_svd_max(&op).unwrap();
        assert!(
            (pair.sigma_max - sigma).abs() / sigma <= 1e-6,
            "power {} vs svd {}",
            pair.sigma_max,
            sigma
        );
    }

    #[test]
    fn max_direction_check_on_identity_and_diag() {
        let view = diag_view(&[1.0, 1.0]);
        let pair = power_iteration(&view, 1e-9, 100, 2).unwrap();
        let check = verify_max_direction(&pair, &view, 200, 3).unwrap();
        assert!(check.passed);

        let view = diag_view(&[3.0, 1.0]);
        let pair = power_iteration(&view, 1e-12, 500, 2).unwrap();
        let check = verify_max_direction(&pair, &view, 1000, 4).unwrap();
        assert!(check.passed, "worst ratio {}", check.worst_ratio);
        assert!(check.worst_ratio <= 1.0 + 1e-6);
    }

    fn scalar_chain_model() -> ModelGraph<f64> {
        // 1x1 conv (scale 2) -> relu -> 1x1 conv (scale 3) -> flatten -> identity fc
        let scale = |s: f64| NodeKind::Conv2d {
            kernel: Tensor::new(vec![1, 1, 1, 1], vec![s]).unwrap(),
            bias: None,
            stride: (1, 1),
            padding: Padding::Zero(0, 0),
        };
        let mut eye = Tensor::<f64>::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let nodes = vec![
            ("c1".to_string(), scale(2.0), vec!["input".to_string()]),
            ("r".to_string(), NodeKind::Relu, vec!["c1".to_string()]),
            ("c2".to_string(), scale(3.0), vec!["r".to_string()]),
            ("flat".to_string(), NodeKind::Flatten, vec!["c2".to_string()]),
            (
                "fc".to_string(),
                NodeKind::FullyConnected {
                    weight: eye,
                    bias: None,
                },
                vec!["flat".to_string()],
            ),
        ];
        ModelGraph::new(nodes, vec![1, 2, 2], 4).unwrap()
    }

    #[test]
    fn product_bound_of_scalar_chain_is_six_and_probes_respect_it() {
        let model = scalar_chain_model();
        let pairs =
            compute_singular_pairs(&model, None, 1e-10, 500, 9).unwrap();
        let cert = lipschitz_product_bound(&model, &pairs, 300, 10).unwrap();
        assert!((cert.product_bound - 6.0).abs() < 1e-9);
        // This chain attains its bound exactly (f = 6x on the positive
        // orthant), so allow machine-epsilon slack; trained nets sit far
        // below the bound and are checked strictly.
        assert!(cert.probe_max <= cert.product_bound * (1.0 + 1e-12));
        // relu makes the map non-expansive beyond 6 but at least 0
        assert!(cert.probe_max > 0.0);
    }

    #[test]
    fn single_layer_bound_equals_its_sigma() {
        let mut rng = rng_from_seed(21);
        let weight = gaussian_tensor::<f64>(&[3, 5], &mut rng);
        let nodes = vec![(
            "fc".to_string(),
            NodeKind::FullyConnected {
                weight,
                bias: None,
            },
            vec!["input".to_string()],
        )];
        let model = ModelGraph::new(nodes, vec![5], 3).unwrap();
        let pairs = compute_singular_pairs(&model, None, 1e-12, 2000, 0).unwrap();
        let cert = lipschitz_product_bound(&model, &pairs, 60, 1).unwrap();
        assert!((cert.product_bound - pairs[0].sigma_max).abs() < 1e-12);
        // A pure linear map: probes can approach but not exceed sigma.
        assert!(cert.probe_max <= cert.product_bound + 1e-12);
    }

    #[test]
    fn singular_pairs_are_bit_deterministic() {
        let mut rng = rng_from_seed(33);
        let kernel = gaussian_tensor::<f64>(&[2, 2, 3, 3], &mut rng);
        let nodes = vec![
            (
                "conv".to_string(),
                NodeKind::Conv2d {
                    kernel,
                    bias: None,
                    stride: (1, 1),
                    padding: Padding::Zero(1, 1),
                },
                vec!["input".to_string()],
            ),
            ("flat".to_string(), NodeKind::Flatten, vec!["conv".to_string()]),
            (
                "fc".to_string(),
                NodeKind::FullyConnected {
                    weight: Tensor::full(&[2, 2 * 36], 0.05),
                    bias: None,
                },
                vec!["flat".to_string()],
            ),
        ];
        let model = ModelGraph::new(nodes, vec![2, 6, 6], 2).unwrap();
        let run = || compute_singular_pairs(&model, None, 1e-8, 137, 77).unwrap();
        let a = run();
        let b = run();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.sigma_max.to_bits(), pb.sigma_max.to_bits());
            assert_eq!(pa.iterations, pb.iterations);
            assert_eq!(pa.v_max, pb.v_max);
        }
    }
}
