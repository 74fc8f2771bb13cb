//! Desk-scale victim training, so attack effectiveness is measurable
//! end-to-end without external checkpoints.
//!
//! Batch normalization trains on batch statistics with momentum-updated
//! moving averages (momentum 0.1); the statistics are treated as constants
//! for differentiation, and only inference-mode normalization is ever
//! exposed to the operator views and the attack.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::model::{BnMode, ModelError, ModelGraph, NodeKind, ParamSource};
use crate::ops::Padding;
use crate::optim::{Adam, SgdMomentum};
use crate::tape::{Tape, TapeError};
use crate::tensor::{Tensor, TensorError};
use crate::util::{rng_from_seed, subseed};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.003,
            optimizer: OptimizerKind::default(),
            seed: 0,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

pub struct TrainOutcome {
    pub model: ModelGraph<f64>,
    pub history: Vec<EpochStats>,
}

enum ParamOptimizer {
    Sgd(SgdMomentum<f64>),
    Adam(Adam<f64>),
}

impl ParamOptimizer {
    fn step(&mut self, param: &mut Tensor<f64>, grad: &Tensor<f64>, lr: f64) {
        match self {
            ParamOptimizer::Sgd(o) => o.step(param, grad, lr),
            ParamOptimizer::Adam(o) => o.step(param, grad, lr),
        }
    }
}

/// Cross-entropy training of a model template. Deterministic under a fixed
/// seed: shuffling, batching and arithmetic are all sequential.
pub fn train(
    mut model: ModelGraph<f64>,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if config.epochs < 1 {
        return Err(TrainError::Config("epochs must be >= 1".into()));
    }
    if config.batch_size < 1 {
        return Err(TrainError::Config("batch_size must be >= 1".into()));
    }
    for set in [train_set, test_set] {
        if set.class_count() > model.class_count() {
            return Err(TrainError::Config(format!(
                "dataset has labels up to {}, model emits {} classes",
                set.class_count() - 1,
                model.class_count()
            )));
        }
    }

    let slots = model.param_slots();
    let mut optimizers: Vec<ParamOptimizer> = slots
        .iter()
        .map(|&(idx, slot)| {
            let dim = model.param(idx, slot).numel();
            match config.optimizer {
                OptimizerKind::SgdMomentum { momentum } => {
                    ParamOptimizer::Sgd(SgdMomentum::new(dim, momentum))
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    ParamOptimizer::Adam(Adam::new(dim).with_betas(beta1, beta2, eps))
                }
            }
        })
        .collect();

    let n = train_set.len();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, subseed(config.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut batch_count = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = train_set.subset(chunk);
            let labels = batch.labels.clone();
            let mut tape = Tape::new();
            let mut leaves = std::collections::HashMap::new();
            for &(idx, slot) in &slots {
                let leaf = tape.leaf(model.param(idx, slot).clone(), true);
                leaves.insert((idx, slot), leaf);
            }
            let input = tape.constant(batch.images.clone());
            let pass = model.forward_on_tape(
                &mut tape,
                input,
                ParamSource::Leaves(&leaves),
                BnMode::Training {
                    momentum: config.bn_momentum,
                },
            )?;
            let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
            let loss_value = tape.value(loss).scalar_value()?;
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += loss_value;
            batch_count += 1;
            let grads = tape.backward(loss)?;
            for (node_idx, new_mean, new_var) in pass.bn_updates {
                model.set_bn_stats(node_idx, new_mean, new_var);
            }
            for (&(idx, slot), opt) in slots.iter().zip(optimizers.iter_mut()) {
                if let Some(grad) = grads.get(leaves[&(idx, slot)]) {
                    opt.step(model.param_mut(idx, slot), grad, config.learning_rate);
                }
            }
        }
        let test_accuracy = evaluate_accuracy(&model, test_set)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / batch_count.max(1) as f64,
            test_accuracy,
        });
    }
    Ok(TrainOutcome { model, history })
}

/// Fisher-Yates with a seeded stream.
fn shuffle(order: &mut [usize], seed: u64) {
    let mut rng = rng_from_seed(seed);
    for i in (1..order.len()).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
}

/// Top-1 accuracy; argmax ties resolve to the lowest class index.
pub fn evaluate_accuracy(model: &ModelGraph<f64>, dataset: &Dataset) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::Config("empty evaluation dataset".into()));
    }
    let mut correct = 0usize;
    let chunk = 128;
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + chunk).min(dataset.len());
        let (images, labels) = dataset.batch(start, end);
        let logits = model.forward(&images)?.logits;
        let k = model.class_count();
        for (row, &label) in labels.iter().enumerate() {
            if argmax(&logits.data()[row * k..(row + 1) * k]) == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// First maximal index (ties -> lowest class).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    crate::util::gaussian_tensor::<f64>(shape, rng).scale(std)
}

fn fresh_bn(channels: usize) -> NodeKind<f64> {
    NodeKind::BatchNorm {
        gamma: Tensor::full(&[channels], 1.0),
        beta: Tensor::zeros(&[channels]),
        moving_mean: Tensor::zeros(&[channels]),
        moving_var: Tensor::full(&[channels], 1.0),
        eps: 1e-5,
    }
}

/// VGG-flavored fixture: three conv stages (the first two with batch norm
/// and max pooling), then a fully connected readout. Six linear layers:
/// conv1, bn1, conv2, bn2, conv3, fc.
pub fn build_smallcnn(
    input_shape: &[usize],
    class_count: usize,
    seed: u64,
) -> Result<ModelGraph<f64>, ModelError> {
    assert_eq!(input_shape.len(), 3, "input must be [C,H,W]");
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    assert!(
        h % 4 == 0 && w % 4 == 0,
        "smallcnn pools twice; spatial dims must be divisible by 4"
    );
    let mut rng = rng_from_seed(seed);
    let (w1, w2, w3) = (8usize, 16usize, 32usize);
    let fc_in = w3 * (h / 4) * (w / 4);
    let nodes = vec![
        (
            "conv1".to_string(),
            NodeKind::Conv2d {
                kernel: he_normal(&[w1, c, 3, 3], c * 9, &mut rng),
                bias: Some(Tensor::zeros(&[w1])),
                stride: (1, 1),
                padding: Padding::Zero(1, 1),
            },
            vec!["input".to_string()],
        ),
        ("bn1".to_string(), fresh_bn(w1), vec!["conv1".to_string()]),
        ("relu1".to_string(), NodeKind::Relu, vec!["bn1".to_string()]),
        (
            "pool1".to_string(),
            NodeKind::MaxPool {
                window: (2, 2),
                stride: (2, 2),
            },
            vec!["relu1".to_string()],
        ),
        (
            "conv2".to_string(),
            NodeKind::Conv2d {
                kernel: he_normal(&[w2, w1, 3, 3], w1 * 9, &mut rng),
                bias: Some(Tensor::zeros(&[w2])),
                stride: (1, 1),
                padding: Padding::Zero(1, 1),
            },
            vec!["pool1".to_string()],
        ),
        ("bn2".to_string(), fresh_bn(w2), vec!["conv2".to_string()]),
        ("relu2".to_string(), NodeKind::Relu, vec!["bn2".to_string()]),
        (
            "pool2".to_string(),
            NodeKind::MaxPool {
                window: (2, 2),
                stride: (2, 2),
            },
            vec!["relu2".to_string()],
        ),
        (
            "conv3".to_string(),
            NodeKind::Conv2d {
                kernel: he_normal(&[w3, w2, 3, 3], w2 * 9, &mut rng),
                bias: Some(Tensor::zeros(&[w3])),
                stride: (1, 1),
                padding: Padding::Zero(1, 1),
            },
            vec!["pool2".to_string()],
        ),
        ("relu3".to_string(), NodeKind::Relu, vec!["conv3".to_string()]),
        ("flat".to_string(), NodeKind::Flatten, vec!["relu3".to_string()]),
        (
            "fc".to_string(),
            NodeKind::FullyConnected {
                weight: he_normal(&[class_count, fc_in], fc_in, &mut rng),
                bias: Some(Tensor::zeros(&[class_count])),
            },
            vec!["flat".to_string()],
        ),
    ];
    ModelGraph::new(nodes, input_shape.to_vec(), class_count)
}

/// ResNet-flavored fixture: a strided stem, two residual blocks (each
/// conv-bn-relu-conv-bn-relu plus identity shortcut), max pooling, and a
/// fully connected readout. Eleven linear layers.
pub fn build_smallres(
    input_shape: &[usize],
    class_count: usize,
    seed: u64,
) -> Result<ModelGraph<f64>, ModelError> {
    assert_eq!(input_shape.len(), 3, "input must be [C,H,W]");
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    assert!(
        h % 4 == 0 && w % 4 == 0,
        "smallres downsamples twice; spatial dims must be divisible by 4"
    );
    let mut rng = rng_from_seed(seed);
    let width = 8usize;
    let fc_in = width * (h / 4) * (w / 4);
    let mut nodes: Vec<(String, NodeKind<f64>, Vec<String>)> = vec![
        (
            "stem_conv".to_string(),
            NodeKind::Conv2d {
                kernel: he_normal(&[width, c, 3, 3], c * 9, &mut rng),
                bias: Some(Tensor::zeros(&[width])),
                stride: (2, 2),
                padding: Padding::Zero(1, 1),
            },
            vec!["input".to_string()],
        ),
        (
            "stem_bn".to_string(),
            fresh_bn(width),
            vec!["stem_conv".to_string()],
        ),
        (
            "stem_relu".to_string(),
            NodeKind::Relu,
            vec!["stem_bn".to_string()],
        ),
    ];
    let mut skip_from = "stem_relu".to_string();
    for b in 1..=2 {
        let conv = |rng: &mut rand_chacha::ChaCha8Rng| NodeKind::Conv2d {
            kernel: he_normal(&[width, width, 3, 3], width * 9, rng),
            bias: Some(Tensor::zeros(&[width])),
            stride: (1, 1),
            padding: Padding::Zero(1, 1),
        };
        let ids = [
            format!("b{b}_conv1"),
            format!("b{b}_bn1"),
            format!("b{b}_relu1"),
            format!("b{b}_conv2"),
            format!("b{b}_bn2"),
            format!("b{b}_relu2"),
            format!("b{b}_add"),
        ];
        nodes.push((ids[0].clone(), conv(&mut rng), vec![skip_from.clone()]));
        nodes.push((ids[1].clone(), fresh_bn(width), vec![ids[0].clone()]));
        nodes.push((ids[2].clone(), NodeKind::Relu, vec![ids[1].clone()]));
        nodes.push((ids[3].clone(), conv(&mut rng), vec![ids[2].clone()]));
        nodes.push((ids[4].clone(), fresh_bn(width), vec![ids[3].clone()]));
        nodes.push((ids[5].clone(), NodeKind::Relu, vec![ids[4].clone()]));
        nodes.push((
            ids[6].clone(),
            NodeKind::ResidualAdd,
            vec![ids[5].clone(), skip_from.clone()],
        ));
        skip_from = ids[6].clone();
    }
    nodes.push((
        "pool".to_string(),
        NodeKind::MaxPool {
            window: (2, 2),
            stride: (2, 2),
        },
        vec![skip_from],
    ));
    nodes.push((
        "flat".to_string(),
        NodeKind::Flatten,
        vec!["pool".to_string()],
    ));
    nodes.push((
        "fc".to_string(),
        NodeKind::FullyConnected {
            weight: he_normal(&[class_count, fc_in], fc_in, &mut rng),
            bias: Some(Tensor::zeros(&[class_count])),
        },
        vec!["flat".to_string()],
    ));
    ModelGraph::new(nodes, input_shape.to_vec(), class_count)
}

/// Builds a fixture architecture by name.
pub fn build_arch(
    arch: &str,
    input_shape: &[usize],
    class_count: usize,
    seed: u64,
) -> Result<ModelGraph<f64>, TrainError> {
    match arch {
        "smallcnn" => Ok(build_smallcnn(input_shape, class_count, seed)?),
        "smallres" => Ok(build_smallres(input_shape, class_count, seed)?),
        other => Err(TrainError::Config(format!(
            "unknown architecture '{other}' (want smallcnn|smallres)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamSource;
    use crate::util::gaussian_tensor;

    /// Linearly separable two-blob set on 1x4x4 images: class 0 lights the
    /// top half, class 1 the bottom half.
    fn toy_blobs(n_per_class: usize, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n_per_class * 2 {
            let class = i % 2;
            let mut img = vec![0.0f64; 16];
            for (p, v) in img.iter_mut().enumerate() {
                let bright = if class == 0 { p < 8 } else { p >= 8 };
                let noise: f64 = rand::Rng::random_range(&mut rng, -0.1..0.1);
                *v = if bright { 0.9 } else { 0.1 } + noise;
            }
            data.extend(img);
            labels.push(class);
        }
        let images = Tensor::new(vec![n_per_class * 2, 1, 4, 4], data).unwrap();
        Dataset::new(images, labels).unwrap()
    }

    fn toy_model(seed: u64) -> ModelGraph<f64> {
        let mut rng = rng_from_seed(seed);
        let nodes = vec![
            (
                "flat".to_string(),
                NodeKind::<f64>::Flatten,
                vec!["input".to_string()],
            ),
            (
                "fc".to_string(),
                NodeKind::FullyConnected {
                    weight: gaussian_tensor::<f64>(&[2, 16], &mut rng).scale(0.1),
                    bias: Some(Tensor::zeros(&[2])),
                },
                vec!["flat".to_string()],
            ),
        ];
        ModelGraph::new(nodes, vec![1, 4, 4], 2).unwrap()
    }

    #[test]
    fn separable_blobs_reach_99_percent_within_five_epochs() {
        let train_set = toy_blobs(100, 1);
        let test_set = toy_blobs(50, 2);
        let outcome = train(
            toy_model(3),
            &train_set,
            &test_set,
            &TrainConfig {
                epochs: 5,
                batch_size: 16,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let final_acc = outcome.history.last().unwrap().test_accuracy;
        assert!(final_acc >= 0.99, "accuracy {final_acc}");
    }

    #[test]
    fn perfect_memorization_scores_one() {
        let set = toy_blobs(20, 5);
        let outcome = train(
            toy_model(6),
            &set,
            &set,
            &TrainConfig {
                epochs: 10,
                batch_size: 8,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(evaluate_accuracy(&outcome.model, &set).unwrap(), 1.0);
    }

    #[test]
    fn untrained_model_scores_near_chance_on_digits() {
        // 10 roughly balanced classes: any untrained network scores within
        // the class-frequency hull, i.e. 1/10 +- 5 points.
        let digits = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../fixtures/digits");
        let test_set = crate::dataset::load_idx_dir(&digits, "test").unwrap();
        for seed in [8, 80, 800] {
            let model = build_smallcnn(&[1, 16, 16], 10, seed).unwrap();
            let acc = evaluate_accuracy(&model, &test_set).unwrap();
            assert!((0.05..=0.15).contains(&acc), "seed {seed}: accuracy {acc}");
        }
    }

    #[test]
    fn constant_logit_model_scores_favored_class_frequency() {
        let mut weight = Tensor::<f64>::zeros(&[2, 16]);
        weight.data_mut().fill(0.0);
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
                    bias: Some(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()),
                },
                vec!["flat".to_string()],
            ),
        ];
        let model = ModelGraph::new(nodes, vec![1, 4, 4], 2).unwrap();
        let set = toy_blobs(50, 9);
        let freq1 = set.labels.iter().filter(|&&l| l == 1).count() as f64 / set.len() as f64;
        assert_eq!(evaluate_accuracy(&model, &set).unwrap(), freq1);
    }

    #[test]
    fn training_is_deterministic_under_fixed_seed() {
        let train_set = toy_blobs(40, 11);
        let test_set = toy_blobs(10, 12);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.02,
            seed: 99,
            ..TrainConfig::default()
        };
        let a = train(toy_model(13), &train_set, &test_set, &config).unwrap();
        let b = train(toy_model(13), &train_set, &test_set, &config).unwrap();
        let xa = a.model.forward(&test_set.image(0)).unwrap().logits;
        let xb = b.model.forward(&test_set.image(0)).unwrap().logits;
        assert_eq!(xa, xb);
        for (ha, hb) in a.history.iter().zip(&b.history) {
            assert_eq!(ha.train_loss.to_bits(), hb.train_loss.to_bits());
            assert_eq!(ha.test_accuracy, hb.test_accuracy);
        }
    }

    #[test]
    fn divergence_is_reported_not_silent() {
        // Identical images with conflicting labels keep the loss away from
        // zero, so an absurd learning rate blows the logits up until a
        // saturated softmax yields -ln(0).
        let image = Tensor::full(&[2, 1, 4, 4], 0.5);
        let conflicted = Dataset::new(image, vec![0, 1]).unwrap();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 2,
            learning_rate: 1e8,
            optimizer: OptimizerKind::SgdMomentum { momentum: 0.9 },
            ..TrainConfig::default()
        };
        match train(toy_model(22), &conflicted, &conflicted, &config) {
            Err(TrainError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn bn_training_forward_agrees_with_inference_at_matched_stats() {
        // When the moving statistics equal the batch statistics, training and
        // inference forwards coincide.
        let mut model = build_smallcnn(&[1, 16, 16], 10, 3).unwrap();
        let mut rng = rng_from_seed(31);
        let batch = gaussian_tensor::<f64>(&[4, 1, 16, 16], &mut rng).map(|v| v.abs().min(1.0));

        // First pass in training mode to harvest batch statistics, which are
        // written into the model as the new moving stats (momentum 1).
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let pass = model
            .forward_on_tape(
                &mut tape,
                input,
                ParamSource::Constants,
                BnMode::Training { momentum: 1.0 },
            )
            .unwrap();
        let train_logits = tape.value(pass.logits).clone();
        for (idx, mean, var) in pass.bn_updates {
            // momentum 1.0 with fresh stats (mean 0, var 1) replaces them,
            // except for the Bessel factor on the variance; undo it so the
            // moving stats equal the biased batch stats used to normalize.
            let geom = &model.nodes()[idx].in_shapes[0];
            let count = (4 * geom[1] * geom[2]) as f64;
            let unbessel = var.scale((count - 1.0) / count);
            model.set_bn_stats(idx, mean, unbessel);
        }
        let infer_logits = model.forward(&batch).unwrap().logits;
        for (a, b) in train_logits.data().iter().zip(infer_logits.data()) {
            assert!((a - b).abs() <= 1e-9, "train {a} vs infer {b}");
        }
    }

    #[test]
    fn smallcnn_has_six_linear_layers_in_documented_order() {
        let model = build_smallcnn(&[1, 16, 16], 10, 0).unwrap();
        assert_eq!(
            model.linear_layer_order(),
            &["conv1", "bn1", "conv2", "bn2", "conv3", "fc"]
        );
    }

    #[test]
    fn smallres_structure() {
        let model = build_smallres(&[1, 16, 16], 10, 0).unwrap();
        assert_eq!(model.linear_layer_order().len(), 11);
        assert!(model.validate_structure().passed());
        // Strided stem: geometry halves at the stem conv.
        let stem = model.node("stem_conv").unwrap();
        assert_eq!(stem.out_shape, vec![8, 8, 8]);
        let out = model.forward(&Tensor::full(&[1, 16, 16], 0.5)).unwrap();
        assert_eq!(out.logits.shape(), &[1, 10]);
    }

    #[test]
    fn bn_pool_geometry_errors_surface() {
        // Indivisible spatial dims violate the builder contract.
        let result = std::panic::catch_unwind(|| build_smallcnn(&[1, 6, 6], 10, 0));
        assert!(result.is_err());
    }
}
