use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use uap_core::attack::{
    run_attack, save_artifact, AttackConfig, InitData, PerturbationInit, DEFAULT_EPSILON,
};

use crate::manifest::{RunRecorder, RUN_MANIFEST_REF};

#[derive(Args)]
pub struct AttackArgs {
    /// Model manifest path.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// linf budget on the [0,1] input scale (default 10/255).
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub eps: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Pseudo-input: range | gaussian | uniform.
    #[arg(long, default_value = "range")]
    pub init: String,
    /// Perturbation start: zeros | uniform-small.
    #[arg(long, default_value = "zeros")]
    pub xi_init: String,
    /// Amplitude for --xi-init uniform-small.
    #[arg(long, default_value_t = 0.01)]
    pub xi_amplitude: f64,
    /// Fraction of leading linear layers visible to the adversary.
    #[arg(long, default_value_t = 1.0)]
    pub layer_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Redraw the pseudo-input's dynamic range every epoch.
    #[arg(long)]
    pub resample_prior: bool,
    /// Scheduler step size in epochs (default epochs/5).
    #[arg(long)]
    pub sched_step: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub sched_decay: f64,
}

pub fn run(args: AttackArgs, threads: usize) -> Result<()> {
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| crate::default_out_dir().join("attack"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut recorder = RunRecorder::new("attack", Some(args.seed), threads);
    recorder.input(&args.model);

    let init_data = match args.init.as_str() {
        "range" => InitData::RangePrior,
        "gaussian" => InitData::gaussian_default(),
        "uniform" => InitData::uniform_default(),
        other => anyhow::bail!("unknown init '{other}' (want range|gaussian|uniform)"),
    };
    let xi_init = match args.xi_init.as_str() {
        "zeros" => PerturbationInit::Zeros,
        "uniform-small" => PerturbationInit::UniformSmall {
            amplitude: args.xi_amplitude,
        },
        other => anyhow::bail!("unknown xi-init '{other}' (want zeros|uniform-small)"),
    };
    let config = AttackConfig {
        epsilon: args.eps,
        epochs: args.epochs,
        learning_rate: args.lr,
        sched_step_size: args.sched_step,
        sched_decay: args.sched_decay,
        init_data,
        xi_init,
        layer_fraction: args.layer_fraction,
        seed: args.seed,
        resample_prior_each_epoch: args.resample_prior,
        layer_weights: None,
    };

    let model = super::load_model_f64(&args.model)?;
    let artifact = run_attack(&model, &config)?;
    println!(
        "attack finished: {} epochs, final objective {:.6}, |uap|_inf = {:.6}",
        artifact.loss_trajectory.len(),
        artifact.loss_trajectory.last().copied().unwrap_or(0.0),
        artifact.perturbation.linf_norm()
    );
    save_artifact(&artifact, &out, Some(RUN_MANIFEST_REF))?;
    recorder.output(&out.join("uap.ntsr"));
    recorder.output(&out.join("artifact.toml"));
    recorder.output(&out.join("uap.ppm"));
    recorder.finish(&out, &artifact.config)?;
    Ok(())
}
