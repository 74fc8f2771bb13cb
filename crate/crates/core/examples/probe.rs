// Scratch probe for threshold calibration; not part of the deliverable.
use std::path::Path;
use std::time::Instant;

use uap_core::attack::{run_attack, semi_whitebox_sweep, AttackConfig};
use uap_core::dataset::load_idx_dir;
use uap_core::eval::fooling_ratio;
use uap_core::spectral::{compute_singular_pairs, lipschitz_product_bound};
use uap_core::tensor::Tensor;
use uap_core::train::{build_smallcnn, build_smallres, train, TrainConfig};
use uap_core::util::{rng_from_seed, uniform_tensor};

fn main() {
    let digits = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/digits");
    let train_set = load_idx_dir(&digits, "train").unwrap();
    let test_set = load_idx_dir(&digits, "test").unwrap();

    let t0 = Instant::now();
    let outcome = train(
        build_smallcnn(&[1, 16, 16], 10, 7).unwrap(),
        &train_set,
        &test_set,
        &TrainConfig::default(),
    )
    .unwrap();
    println!("smallcnn train: {:?}", t0.elapsed());
    for h in &outcome.history {
        println!(
            "  epoch {:2} loss {:.4} test_acc {:.4}",
            h.epoch, h.train_loss, h.test_accuracy
        );
    }
    let model = outcome.model;

    let t0 = Instant::now();
    let res_outcome = train(
        build_smallres(&[1, 16, 16], 10, 9).unwrap(),
        &train_set,
        &test_set,
        &TrainConfig::default(),
    )
    .unwrap();
    println!(
        "smallres train: {:?} final acc {:.4}",
        t0.elapsed(),
        res_outcome.history.last().unwrap().test_accuracy
    );
    let res_model = res_outcome.model;

    // Spectral sanity.
    let t0 = Instant::now();
    let pairs = compute_singular_pairs(&model, None, 1e-6, 500, 1).unwrap();
    println!("spectra in {:?}", t0.elapsed());
    for p in &pairs {
        println!(
            "  {} sigma {:.4} iters {} residual {:.2e} converged {}",
            p.layer_id, p.sigma_max, p.iterations, p.residual, p.converged
        );
    }
    let cert = lipschitz_product_bound(&model, &pairs, 1000, 3).unwrap();
    println!(
        "product bound {:.3e} probe max {:.3} margin x{:.1}",
        cert.product_bound,
        cert.probe_max,
        cert.product_bound / cert.probe_max
    );

    // Attack at eps=0.1, 5 seeds, compare to random baseline.
    for epochs in [200usize, 500] {
        let mut att = Vec::new();
        let mut base = Vec::new();
        let t0 = Instant::now();
        for seed in 0..5u64 {
            let config = AttackConfig {
                epsilon: 0.1,
                epochs,
                seed,
                ..AttackConfig::default()
            };
            let artifact = run_attack(&model, &config).unwrap();
            let report =
                fooling_ratio(&model, "smallcnn", &artifact.perturbation, "uap", &test_set)
                    .unwrap();
            att.push(report.fooling_ratio);
            let mut rng = rng_from_seed(seed + 1000);
            let noise: Tensor<f64> = uniform_tensor(&[1, 16, 16], -0.1, 0.1, &mut rng);
            let noise_report =
                fooling_ratio(&model, "smallcnn", &noise, "noise", &test_set).unwrap();
            base.push(noise_report.fooling_ratio);
            println!(
                "  T={epochs} seed {seed}: attack fooling {:.4} (traj[1] {:.4} -> final {:.4}), noise {:.4}",
                report.fooling_ratio,
                artifact.loss_trajectory.get(1).copied().unwrap_or(0.0),
                artifact.loss_trajectory.last().unwrap(),
                noise_report.fooling_ratio
            );
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "T={epochs}: attack mean {:.4}, noise mean {:.4}, ratio {:.2}, took {:?}",
            mean(&att),
            mean(&base),
            mean(&att) / mean(&base).max(1e-9),
            t0.elapsed()
        );
    }

    // Semi-white-box sweep on one seed.
    let config = AttackConfig {
        epsilon: 0.1,
        epochs: 200,
        seed: 0,
        ..AttackConfig::default()
    };
    let sweep = semi_whitebox_sweep(&model, &config, &[0.25, 0.5, 0.75, 1.0]).unwrap();
    for (frac, artifact) in &sweep {
        let report =
            fooling_ratio(&model, "smallcnn", &artifact.perturbation, "uap", &test_set).unwrap();
        println!(
            "fraction {frac}: layers {} fooling {:.4} final obj {:.4}",
            artifact.per_layer_alignment.len(),
            report.fooling_ratio,
            artifact.loss_trajectory.last().unwrap()
        );
    }

    // Transfer: smallcnn uap vs smallres.
    let artifact = run_attack(&model, &config).unwrap();
    let r = fooling_ratio(&res_model, "smallres", &artifact.perturbation, "uap", &test_set).unwrap();
    println!("transfer smallcnn->smallres fooling {:.4}", r.fooling_ratio);
    let config_res = AttackConfig { ..config.clone() };
    let artifact_res = run_attack(&res_model, &config_res).unwrap();
    let r2 = fooling_ratio(&model, "smallcnn", &artifact_res.perturbation, "uap", &test_set).unwrap();
    println!("transfer smallres->smallcnn fooling {:.4}", r2.fooling_ratio);
    let r3 = fooling_ratio(&res_model, "smallres", &artifact_res.perturbation, "uap", &test_set).unwrap();
    println!("whitebox smallres fooling {:.4}", r3.fooling_ratio);
}
