use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use uap_core::model::save_model;
use uap_core::train::{build_arch, train, EpochStats, OptimizerKind, TrainConfig};

use crate::manifest::{RunRecorder, RUN_MANIFEST_REF};

#[derive(Args)]
pub struct TrainArgs {
    /// Fixture architecture: smallcnn | smallres.
    #[arg(long)]
    pub arch: String,
    /// Dataset directory (IDX pair or NTSR1 tensor directory).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (defaults to $UAP_OUT_DIR/<arch>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.003)]
    pub lr: f64,
    /// Optimizer: adam | sgd.
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Initialization seed for the model template (defaults to --seed).
    #[arg(long)]
    pub init_seed: Option<u64>,
}

#[derive(Serialize)]
struct TrainReport {
    format: String,
    run_manifest: String,
    arch: String,
    final_test_accuracy: f64,
    final_train_loss: f64,
    history: Vec<EpochStats>,
}

#[derive(Serialize)]
struct ResolvedTrainConfig {
    arch: String,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    optimizer: String,
    momentum: f64,
    seed: u64,
    init_seed: u64,
    bn_momentum: f64,
}

pub fn run(args: TrainArgs, threads: usize) -> Result<()> {
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| crate::default_out_dir().join(&args.arch));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut recorder = RunRecorder::new("train", Some(args.seed), threads);
    recorder.input(&args.data);

    let train_set = super::load_dataset(&args.data, "train")?;
    let test_set = super::load_dataset(&args.data, "test")?;
    let class_count = train_set.class_count().max(test_set.class_count());
    let init_seed = args.init_seed.unwrap_or(args.seed);
    let template = build_arch(&args.arch, train_set.image_shape(), class_count, init_seed)?;

    let optimizer = match args.optimizer.as_str() {
        "adam" => OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        "sgd" => OptimizerKind::SgdMomentum {
            momentum: args.momentum,
        },
        other => anyhow::bail!("unknown optimizer '{other}' (want adam|sgd)"),
    };
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        optimizer,
        seed: args.seed,
        bn_momentum: 0.1,
    };
    let outcome = train(template, &train_set, &test_set, &config)?;

    let model_dir = out.join("model");
    std::fs::create_dir_all(&model_dir)?;
    let manifest_path = save_model(&outcome.model, &args.arch, &model_dir)?;
    recorder.output(&manifest_path);

    let last = outcome.history.last().expect("epochs >= 1");
    println!(
        "trained {} for {} epochs: test accuracy {:.4}",
        args.arch, args.epochs, last.test_accuracy
    );
    let report = TrainReport {
        format: "train-report/1".into(),
        run_manifest: RUN_MANIFEST_REF.into(),
        arch: args.arch.clone(),
        final_test_accuracy: last.test_accuracy,
        final_train_loss: last.train_loss,
        history: outcome.history,
    };
    let report_path = out.join("report.toml");
    std::fs::write(&report_path, toml::to_string(&report)?)?;
    recorder.output(&report_path);

    recorder.finish(
        &out,
        &ResolvedTrainConfig {
            arch: args.arch,
            epochs: args.epochs,
            batch_size: args.batch_size,
            learning_rate: args.lr,
            optimizer: args.optimizer,
            momentum: args.momentum,
            seed: args.seed,
            init_seed,
            bn_momentum: 0.1,
        },
    )?;
    Ok(())
}
