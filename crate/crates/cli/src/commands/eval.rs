use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use uap_core::eval::{robustness_table, Defense};
use uap_core::io::read_ntsr1;
use uap_core::tensor::Tensor;

use crate::manifest::{RunRecorder, RUN_MANIFEST_REF};

#[derive(Args)]
pub struct EvalArgs {
    /// Model manifest path.
    #[arg(long)]
    pub model: PathBuf,
    /// Perturbation blob (NTSR1).
    #[arg(long)]
    pub uap: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset split to evaluate.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defense rows in addition to the undefended baseline; repeatable.
    /// Forms: none | gaussian:SIGMA,RADIUS | median:K.
    #[arg(long = "defense")]
    pub defenses: Vec<String>,
}

#[derive(Serialize)]
struct ResolvedEvalConfig {
    model: String,
    uap: String,
    data: String,
    split: String,
    defenses: Vec<String>,
}

pub fn run(args: EvalArgs, threads: usize) -> Result<()> {
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| crate::default_out_dir().join("eval"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut recorder = RunRecorder::new("eval", None, threads);
    recorder.input(&args.model);
    recorder.input(&args.uap);
    recorder.input(&args.data);

    let model = super::load_model_f64(&args.model)?;
    let uap: Tensor<f64> = read_ntsr1(&args.uap)?;
    let dataset = super::load_dataset(&args.data, &args.split)?;
    let defenses: Vec<Defense> = args
        .defenses
        .iter()
        .map(|d| Defense::parse(d))
        .collect::<Result<_, _>>()?;

    let model_id = super::label_of(&args.model.parent().unwrap_or(&args.model).to_path_buf());
    let uap_id = super::label_of(&args.uap);
    let rows = robustness_table(&model, &model_id, &uap, &uap_id, &dataset, &defenses)?;
    for r in &rows {
        println!(
            "{} vs {} [{}]: fooling {:.4}, clean acc {:.4}, perturbed acc {:.4}",
            r.model_id, r.uap_id, r.defense, r.fooling_ratio, r.clean_accuracy, r.perturbed_accuracy
        );
    }
    let csv_path = out.join("eval.csv");
    write_csv_with_manifest_ref(&csv_path, &rows)?;
    recorder.output(&csv_path);

    recorder.finish(
        &out,
        &ResolvedEvalConfig {
            model: args.model.display().to_string(),
            uap: args.uap.display().to_string(),
            data: args.data.display().to_string(),
            split: args.split,
            defenses: args.defenses,
        },
    )?;
    Ok(())
}

/// Writes the standard eval CSV prefixed by a `# run_manifest:` comment so
/// every emitted artifact points back at its run manifest.
pub(crate) fn write_csv_with_manifest_ref(
    path: &std::path::Path,
    rows: &[uap_core::eval::EvalReport],
) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    uap_core::eval::write_reports_csv(&tmp, rows)?;
    let body = std::fs::read_to_string(&tmp)?;
    std::fs::remove_file(&tmp)?;
    std::fs::write(path, format!("# run_manifest: {RUN_MANIFEST_REF}\n{body}"))?;
    Ok(())
}
