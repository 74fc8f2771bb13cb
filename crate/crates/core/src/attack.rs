//! Data-free perturbation synthesis.
//!
//! The attack propagates the difference between a clean and a perturbed
//! forward pass through the network (two coupled paths; nonlinearities are
//! applied exactly, never linearized) and maximizes the absolute inner
//! product between each linear layer's incoming difference and that layer's
//! top right singular vector. The loss is the negative alignment sum; after
//! every optimizer step the perturbation is clamped to the `linf` ball.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{write_ntsr1, write_ppm, IoFormatError};
use crate::model::{BnMode, ModelError, ModelGraph, ParamSource};
use crate::optim::{Adam, StepLr};
use crate::spectral::{
    compute_singular_pairs, SingularPair, SpectralError, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use crate::tape::{Tape, TapeError, ValueId};
use crate::tensor::{Tensor, TensorError};
use crate::util::{rng_from_seed, subseed};

/// Default `linf` budget: 10 on the [0,255] pixel scale.
pub const DEFAULT_EPSILON: f64 = 10.0 / 255.0;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch} (layer term {layer})")]
    NumericFailure { epoch: usize, layer: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] IoFormatError),
}

/// Pseudo-input used in place of real data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitData {
    /// Per-channel mean constants plus a uniform dynamic range per element.
    RangePrior,
    /// I.i.d. normal draws clipped to [0,1].
    Gaussian { mean: f64, std: f64 },
    /// I.i.d. uniform draws from [lo, hi).
    Uniform { lo: f64, hi: f64 },
}

impl Default for InitData {
    fn default() -> Self {
        InitData::RangePrior
    }
}

impl InitData {
    pub fn gaussian_default() -> Self {
        InitData::Gaussian {
            mean: 0.45,
            std: 0.1,
        }
    }

    pub fn uniform_default() -> Self {
        InitData::Uniform { lo: 0.40, hi: 0.60 }
    }
}

/// Starting value of the perturbation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationInit {
    Zeros,
    /// Uniform in [-amplitude, amplitude); useful to step off the |.| kink.
    UniformSmall { amplitude: f64 },
}

impl Default for PerturbationInit {
    fn default() -> Self {
        PerturbationInit::Zeros
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// `linf` budget on the [0,1] input scale.
    pub epsilon: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Step-decay interval in epochs; `None` resolves to `max(1, epochs/5)`.
    pub sched_step_size: Option<usize>,
    pub sched_decay: f64,
    pub init_data: InitData,
    pub xi_init: PerturbationInit,
    /// Fraction of leading linear layers visible to the adversary, in (0,1].
    pub layer_fraction: f64,
    pub seed: u64,
    /// Redraw the pseudo-input every epoch (fresh dynamic range).
    pub resample_prior_each_epoch: bool,
    /// Optional per-layer weights on the alignment terms; all ones when absent.
    pub layer_weights: Option<Vec<f64>>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: DEFAULT_EPSILON,
            epochs: 200,
            learning_rate: 0.01,
            sched_step_size: None,
            sched_decay: 0.5,
            init_data: InitData::default(),
            xi_init: PerturbationInit::default(),
            layer_fraction: 1.0,
            seed: 0,
            resample_prior_each_epoch: false,
            layer_weights: None,
        }
    }
}

impl AttackConfig {
    fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(AttackError::Config(format!(
                "epsilon must be in (0,1], got {}",
                self.epsilon
            )));
        }
        if self.epochs < 1 {
            return Err(AttackError::Config("epochs must be >= 1".into()));
        }
        if !(self.layer_fraction > 0.0 && self.layer_fraction <= 1.0) {
            return Err(AttackError::Config(format!(
                "layer_fraction must be in (0,1], got {}",
                self.layer_fraction
            )));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(AttackError::Config("learning rate must be >= 0".into()));
        }
        if let InitData::Uniform { lo, hi } = self.init_data {
            if !(lo < hi) {
                return Err(AttackError::Config(format!(
                    "uniform init needs lo < hi, got [{lo}, {hi})"
                )));
            }
        }
        if let InitData::Gaussian { std, .. } = self.init_data {
            if !(std >= 0.0) {
                return Err(AttackError::Config("gaussian std must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Fills in the scheduler default; the resolved form is what artifacts
    /// record.
    pub fn resolved(&self) -> AttackConfig {
        let mut out = self.clone();
        out.sched_step_size = Some(
            self.sched_step_size
                .unwrap_or_else(|| (self.epochs / 5).max(1)),
        );
        out
    }
}

/// Number of leading linear layers selected by a fraction.
pub fn selected_layer_count(total: usize, fraction: f64) -> usize {
    ((fraction * total as f64).ceil() as usize).clamp(1, total)
}

/// Channel means of the range prior: the standard RGB dataset means for
/// three-channel inputs, their average for anything else.
pub fn range_prior_means(channels: usize) -> Vec<f64> {
    const RGB: [f64; 3] = [0.485, 0.456, 0.406];
    if channels == 3 {
        RGB.to_vec()
    } else {
        vec![RGB.iter().sum::<f64>() / 3.0; channels]
    }
}

/// Draws the pseudo-input `x` for the attack. `[C,H,W]` shapes get
/// per-channel range-prior means; any other shape is treated as one channel.
pub fn make_init_data(kind: &InitData, shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_from_seed(seed);
    let c = if shape.len() == 3 { shape[0] } else { 1 };
    let plane: usize = shape.iter().product::<usize>() / c;
    let mut out = Tensor::zeros(shape);
    match kind {
        InitData::RangePrior => {
            let means = range_prior_means(c);
            for ch in 0..c {
                for p in 0..plane {
                    let jitter: f64 = rand::Rng::random_range(&mut rng, -0.5..0.5);
                    out.data_mut()[ch * plane + p] = (means[ch] + jitter).clamp(0.0, 1.0);
                }
            }
        }
        InitData::Gaussian { mean, std } => {
            let dist = rand_distr::Normal::new(*mean, *std).expect("validated std");
            for v in out.data_mut() {
                *v = rand::Rng::sample(&mut rng, dist).clamp(0.0, 1.0);
            }
        }
        InitData::Uniform { lo, hi } => {
            for v in out.data_mut() {
                *v = rand::Rng::random_range(&mut rng, *lo..*hi);
            }
        }
    }
    out
}

/// Runs the clean path (no tape) and the perturbed path (on tape) and
/// returns, per linear layer, the difference of the two paths' inputs.
/// Gradients flow to `xi` through the perturbed path; nonlinearities act on
/// both paths exactly.
pub fn propagate_delta(
    model: &ModelGraph<f64>,
    tape: &mut Tape<f64>,
    x: &Tensor<f64>,
    xi: ValueId,
) -> Result<Vec<ValueId>, AttackError> {
    let clean = model.forward(x)?;
    let mut batched_shape = vec![1];
    batched_shape.extend_from_slice(x.shape());
    let x_const = tape.constant(x.reshape(&batched_shape)?);
    let xi_batched = tape.reshape(xi, &batched_shape)?;
    let x_adv = tape.add(x_const, xi_batched)?;
    let perturbed =
        model.forward_on_tape(tape, x_adv, ParamSource::Constants, BnMode::Inference)?;
    let mut deltas = Vec::with_capacity(perturbed.linear_inputs.len());
    for (&adv_id, snap) in perturbed.linear_inputs.iter().zip(&clean.snapshots) {
        let snap_const = tape.constant(snap.clone());
        deltas.push(tape.sub(adv_id, snap_const)?);
    }
    Ok(deltas)
}

/// Builds `loss = -sum_k w_k |<delta_k, v_k>|` over the selected layers.
/// Returns the loss id and the per-layer `|<delta_k, v_k>|` term ids.
pub fn alignment_loss(
    tape: &mut Tape<f64>,
    deltas: &[ValueId],
    pairs: &[SingularPair],
    weights: Option<&[f64]>,
) -> Result<(ValueId, Vec<ValueId>), AttackError> {
    if deltas.len() < pairs.len() {
        return Err(AttackError::Config(format!(
            "{} deltas for {} singular pairs",
            deltas.len(),
            pairs.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != pairs.len() {
            return Err(AttackError::Config(format!(
                "{} layer weights for {} selected layers",
                w.len(),
                pairs.len()
            )));
        }
    }
    let mut terms = Vec::with_capacity(pairs.len());
    let mut weighted = Vec::with_capacity(pairs.len());
    for (k, pair) in pairs.iter().enumerate() {
        let delta_shape = tape.value(deltas[k]).shape().to_vec();
        let v = pair.v_max.reshape(&delta_shape)?;
        let inner = tape.inner_const(deltas[k], v)?;
        let term = tape.abs(inner);
        terms.push(term);
        let w = weights.map_or(1.0, |w| w[k]);
        weighted.push(if w == 1.0 { term } else { tape.scale(term, w) });
    }
    let total = tape.sum_scalars(&weighted)?;
    let loss = tape.neg(total);
    Ok((loss, terms))
}

/// The optimized perturbation with its trajectory and provenance.
#[derive(Debug, Clone)]
pub struct AttackArtifact {
    /// The perturbation, in the model's input geometry; `linf <= epsilon`.
    pub perturbation: Tensor<f64>,
    /// Per-epoch positive alignment objective `sum_k w_k |<delta_k, v_k>|`,
    /// evaluated with the perturbation as of the epoch start.
    pub loss_trajectory: Vec<f64>,
    /// Fully resolved configuration that produced this artifact.
    pub config: AttackConfig,
    /// Final `(layer_id, |<delta_k, v_k>|)` per selected layer, computed
    /// with the returned perturbation.
    pub per_layer_alignment: Vec<(String, f64)>,
}

fn check_terms(
    tape: &Tape<f64>,
    terms: &[ValueId],
    deltas: &[ValueId],
    pairs: &[SingularPair],
    epoch: usize,
) -> Result<(), AttackError> {
    for ((&term, &delta), pair) in terms.iter().zip(deltas).zip(pairs) {
        let value = tape.value(term).scalar_value()?;
        let delta_norm = tape.value(delta).l2_norm();
        // Cauchy-Schwarz with unit v: |<delta, v>| <= ||delta||. A violation
        // can only come from non-finite arithmetic.
        if !value.is_finite() || value > delta_norm * (1.0 + 1e-9) + 1e-12 {
            return Err(AttackError::NumericFailure {
                epoch,
                layer: pair.layer_id.clone(),
            });
        }
    }
    Ok(())
}

/// Full attack loop: singular pairs, delta propagation, alignment loss,
/// Adam with step decay, and a hard projection to the `linf` ball after
/// every step.
pub fn run_attack(
    model: &ModelGraph<f64>,
    config: &AttackConfig,
) -> Result<AttackArtifact, AttackError> {
    config.validate()?;
    let config = config.resolved();
    let total = model.linear_layer_order().len();
    if total == 0 {
        return Err(AttackError::Config("model has no linear layers".into()));
    }
    let selected = selected_layer_count(total, config.layer_fraction);
    if let Some(w) = &config.layer_weights {
        if w.len() != selected {
            return Err(AttackError::Config(format!(
                "{} layer weights for {selected} selected layers",
                w.len()
            )));
        }
    }
    let pairs = compute_singular_pairs(
        model,
        Some(selected),
        DEFAULT_TOL,
        DEFAULT_MAX_ITERS,
        config.seed,
    )?;

    let shape = model.input_shape().to_vec();
    let mut x = make_init_data(&config.init_data, &shape, subseed(config.seed, "init-data", 0));
    let mut xi = match config.xi_init {
        PerturbationInit::Zeros => Tensor::zeros(&shape),
        PerturbationInit::UniformSmall { amplitude } => {
            let mut rng = rng_from_seed(subseed(config.seed, "xi-init", 0));
            crate::util::uniform_tensor::<f64>(&shape, -amplitude, amplitude, &mut rng)
                .map(|v| v.clamp(-config.epsilon, config.epsilon))
        }
    };

    let epochs = config.epochs;
    let sched = StepLr::new(
        config.learning_rate,
        config.sched_step_size.expect("resolved"),
        config.sched_decay,
    );
    let mut adam = Adam::new(xi.numel());
    let mut trajectory = Vec::with_capacity(epochs);
    let weights = config.layer_weights.as_deref();

    for epoch in 0..epochs {
        if config.resample_prior_each_epoch && epoch > 0 {
            x = make_init_data(
                &config.init_data,
                &shape,
                subseed(config.seed, "init-data", epoch as u64),
            );
        }
        let mut tape = Tape::new();
        let xi_leaf = tape.leaf(xi.clone(), true);
        let deltas = propagate_delta(model, &mut tape, &x, xi_leaf)?;
        let (loss, terms) = alignment_loss(&mut tape, &deltas[..selected], &pairs, weights)?;
        check_terms(&tape, &terms, &deltas, &pairs, epoch)?;
        // The positive objective actually optimized; equals the plain
        // alignment sum under the default all-ones weights.
        trajectory.push(-tape.value(loss).scalar_value()?);

        let grads = tape.backward(loss)?;
        let grad = grads
            .get(xi_leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&shape));
        adam.step(&mut xi, &grad, sched.lr_at(epoch));
        for v in xi.data_mut() {
            *v = v.clamp(-config.epsilon, config.epsilon);
        }
        assert!(
            xi.linf_norm() <= config.epsilon,
            "budget invariant violated after clip"
        );
    }

    // Final per-layer alignment with the returned perturbation.
    let mut tape = Tape::new();
    let xi_leaf = tape.constant(xi.clone());
    let deltas = propagate_delta(model, &mut tape, &x, xi_leaf)?;
    let (_, terms) = alignment_loss(&mut tape, &deltas[..selected], &pairs, weights)?;
    let per_layer_alignment = terms
        .iter()
        .zip(&pairs)
        .map(|(&t, p)| Ok((p.layer_id.clone(), tape.value(t).scalar_value()?)))
        .collect::<Result<Vec<_>, AttackError>>()?;

    Ok(AttackArtifact {
        perturbation: xi,
        loss_trajectory: trajectory,
        config,
        per_layer_alignment,
    })
}

/// Runs the attack once per layer fraction with a shared seed and init.
pub fn semi_whitebox_sweep(
    model: &ModelGraph<f64>,
    config: &AttackConfig,
    fractions: &[f64],
) -> Result<Vec<(f64, AttackArtifact)>, AttackError> {
    fractions
        .iter()
        .map(|&fraction| {
            let mut cfg = config.clone();
            cfg.layer_fraction = fraction;
            cfg.layer_weights = None;
            Ok((fraction, run_attack(model, &cfg)?))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactDoc {
    format: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    run_manifest: Option<String>,
    final_objective: f64,
    perturbation_linf: f64,
    config: AttackConfig,
    per_layer_alignment: Vec<LayerAlignmentDoc>,
    loss_trajectory: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerAlignmentDoc {
    layer_id: String,
    alignment: f64,
}

/// Serializes an artifact: `uap.ntsr` (the perturbation), `artifact.toml`
/// (config, trajectory, alignments), and `uap.ppm` (the perturbation mapped
/// from [-eps, eps] onto 0..=255 for inspection).
pub fn save_artifact(
    artifact: &AttackArtifact,
    dir: &Path,
    run_manifest: Option<&str>,
) -> Result<(), AttackError> {
    fs::create_dir_all(dir).map_err(|e| IoFormatError::io(dir, e))?;
    write_ntsr1(&dir.join("uap.ntsr"), &artifact.perturbation)?;
    write_ppm(
        &dir.join("uap.ppm"),
        &artifact.perturbation,
        -artifact.config.epsilon,
        artifact.config.epsilon,
    )?;
    let doc = ArtifactDoc {
        format: "uap-artifact/1".into(),
        run_manifest: run_manifest.map(str::to_string),
        final_objective: artifact.loss_trajectory.last().copied().unwrap_or(0.0),
        perturbation_linf: artifact.perturbation.linf_norm(),
        config: artifact.config.clone(),
        per_layer_alignment: artifact
            .per_layer_alignment
            .iter()
            .map(|(layer_id, alignment)| LayerAlignmentDoc {
                layer_id: layer_id.clone(),
                alignment: *alignment,
            })
            .collect(),
        loss_trajectory: artifact.loss_trajectory.clone(),
    };
    let path = dir.join("artifact.toml");
    let text = toml::to_string(&doc).map_err(|e| {
        AttackError::Config(format!("artifact serialization failed: {e}"))
    })?;
    fs::write(&path, text).map_err(|e| IoFormatError::io(&path, e))?;
    Ok(())
}
