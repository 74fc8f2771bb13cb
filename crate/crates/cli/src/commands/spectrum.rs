use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use uap_core::io::write_ntsr1;
use uap_core::linops::{materialize_view, view_linear_layer, DEFAULT_DENSE_ELEMENT_CAP};
use uap_core::spectral::{
    compute_singular_pairs, dense_svd_max, lipschitz_product_bound, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};

use crate::manifest::{RunRecorder, RUN_MANIFEST_REF};

#[derive(Args)]
pub struct SpectrumArgs {
    /// Model manifest path.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Power-iteration relative tolerance on sigma.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cross-check each layer against a dense SVD of the materialized
    /// operator (adds sigma_dense and rel_err columns).
    #[arg(long)]
    pub oracle: bool,
    /// Random probe pairs for the Lipschitz certificate.
    #[arg(long, default_value_t = 1000)]
    pub probes: usize,
    /// Element cap for dense materialization.
    #[arg(long, default_value_t = DEFAULT_DENSE_ELEMENT_CAP)]
    pub cap: usize,
    /// Dump one layer's dense operator as an NTSR1 blob.
    #[arg(long)]
    pub dump_operator: Option<String>,
}

#[derive(Serialize)]
struct CertificateDoc {
    format: String,
    run_manifest: String,
    product_bound: f64,
    probe_max: f64,
    probe_count: usize,
    seed: u64,
    per_layer: Vec<LayerSigmaDoc>,
}

#[derive(Serialize)]
struct LayerSigmaDoc {
    layer_id: String,
    sigma_max: f64,
}

#[derive(Serialize)]
struct ResolvedSpectrumConfig {
    model: String,
    tol: f64,
    max_iters: usize,
    seed: u64,
    oracle: bool,
    probes: usize,
    cap: usize,
}

pub fn run(args: SpectrumArgs, threads: usize) -> Result<()> {
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| crate::default_out_dir().join("spectrum"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut recorder = RunRecorder::new("spectrum", Some(args.seed), threads);
    recorder.input(&args.model);

    let model = super::load_model_f64(&args.model)?;
    let pairs = compute_singular_pairs(&model, None, args.tol, args.max_iters, args.seed)?;

    let mut csv = String::from("layer_id,sigma_max,iterations,residual");
    if args.oracle {
        csv.push_str(",sigma_dense,rel_err");
    }
    csv.push('\n');
    for pair in &pairs {
        csv.push_str(&format!(
            "{},{},{},{}",
            pair.layer_id, pair.sigma_max, pair.iterations, pair.residual
        ));
        if args.oracle {
            let view = view_linear_layer(&model, &pair.layer_id)?;
            let dense = materialize_view(&view, args.cap)?;
            let (sigma_dense, _) = dense_svd_max(&dense)?;
            let rel = (pair.sigma_max - sigma_dense).abs() / sigma_dense.max(1e-300);
            csv.push_str(&format!(",{sigma_dense},{rel}"));
        }
        csv.push('\n');
    }
    let csv_path = out.join("spectrum.csv");
    std::fs::write(&csv_path, csv)?;
    recorder.output(&csv_path);

    let cert = lipschitz_product_bound(&model, &pairs, args.probes, args.seed)?;
    println!(
        "{} layers: product bound {:.6e}, probe max {:.6}",
        pairs.len(),
        cert.product_bound,
        cert.probe_max
    );
    let cert_doc = CertificateDoc {
        format: "lipschitz-certificate/1".into(),
        run_manifest: RUN_MANIFEST_REF.into(),
        product_bound: cert.product_bound,
        probe_max: cert.probe_max,
        probe_count: cert.probe_count,
        seed: args.seed,
        per_layer: cert
            .per_layer
            .iter()
            .map(|(layer_id, sigma_max)| LayerSigmaDoc {
                layer_id: layer_id.clone(),
                sigma_max: *sigma_max,
            })
            .collect(),
    };
    let cert_path = out.join("certificate.toml");
    std::fs::write(&cert_path, toml::to_string(&cert_doc)?)?;
    recorder.output(&cert_path);

    if let Some(layer_id) = &args.dump_operator {
        let view = view_linear_layer(&model, layer_id)?;
        let dense = materialize_view(&view, args.cap)?;
        let dump_path = out.join(format!("operator.{layer_id}.ntsr"));
        write_ntsr1(&dump_path, &dense.to_tensor())?;
        recorder.output(&dump_path);
    }

    recorder.finish(
        &out,
        &ResolvedSpectrumConfig {
            model: args.model.display().to_string(),
            tol: args.tol,
            max_iters: args.max_iters,
            seed: args.seed,
            oracle: args.oracle,
            probes: args.probes,
            cap: args.cap,
        },
    )?;
    Ok(())
}
