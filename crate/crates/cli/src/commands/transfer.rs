use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use uap_core::eval::{transfer_matrix, write_transfer_csv};
use uap_core::io::read_ntsr1;
use uap_core::model::ModelGraph;
use uap_core::tensor::Tensor;

use crate::manifest::{RunRecorder, RUN_MANIFEST_REF};

#[derive(Args)]
pub struct TransferArgs {
    /// Model manifest paths (comma-separated or repeated).
    #[arg(long = "models", value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    /// Perturbation blobs (comma-separated or repeated).
    #[arg(long = "uaps", value_delimiter = ',', required = true)]
    pub uaps: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ResolvedTransferConfig {
    models: Vec<String>,
    uaps: Vec<String>,
    data: String,
    split: String,
}

pub fn run(args: TransferArgs, threads: usize) -> Result<()> {
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| crate::default_out_dir().join("transfer"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut recorder = RunRecorder::new("transfer", None, threads);
    for m in &args.models {
        recorder.input(m);
    }
    for u in &args.uaps {
        recorder.input(u);
    }
    recorder.input(&args.data);

    let models: Vec<(String, ModelGraph<f64>)> = args
        .models
        .iter()
        .map(|p| {
            Ok((
                super::label_of(&p.parent().unwrap_or(p).to_path_buf()),
                super::load_model_f64(p)?,
            ))
        })
        .collect::<Result<_>>()?;
    let uaps: Vec<(String, Tensor<f64>)> = args
        .uaps
        .iter()
        .map(|p| Ok((super::label_of(p), read_ntsr1::<f64>(p)?)))
        .collect::<Result<_>>()?;
    let dataset = super::load_dataset(&args.data, &args.split)?;

    let model_refs: Vec<(String, &ModelGraph<f64>)> =
        models.iter().map(|(id, m)| (id.clone(), m)).collect();
    let uap_refs: Vec<(String, &Tensor<f64>)> =
        uaps.iter().map(|(id, u)| (id.clone(), u)).collect();
    let matrix = transfer_matrix(&model_refs, &uap_refs, &dataset)?;
    for (uap_id, row) in matrix.uap_ids.iter().zip(&matrix.cells) {
        let cells: Vec<String> = row
            .iter()
            .map(|c| c.map_or("NA".to_string(), |v| format!("{v:.4}")))
            .collect();
        println!("{uap_id}: {}", cells.join(" "));
    }

    let csv_path = out.join("transfer.csv");
    let tmp = csv_path.with_extension("csv.tmp");
    write_transfer_csv(&tmp, &matrix)?;
    let body = std::fs::read_to_string(&tmp)?;
    std::fs::remove_file(&tmp)?;
    std::fs::write(&csv_path, format!("# run_manifest: {RUN_MANIFEST_REF}\n{body}"))?;
    recorder.output(&csv_path);

    recorder.finish(
        &out,
        &ResolvedTransferConfig {
            models: args.models.iter().map(|p| p.display().to_string()).collect(),
            uaps: args.uaps.iter().map(|p| p.display().to_string()).collect(),
            data: args.data.display().to_string(),
            split: args.split,
        },
    )?;
    Ok(())
}
