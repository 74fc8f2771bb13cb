//! Layer-graph IR for the victim networks.
//!
//! A [`ModelGraph`] is a validated DAG of layer nodes with a single input
//! and a single output. Linear nodes (convolution, batch normalization,
//! fully connected) carry parameters; every other admitted node kind is
//! 1-Lipschitz, so the graph's sensitivity to input perturbations is
//! governed entirely by its linear layers.

mod manifest;

pub use manifest::{load_model, save_model};

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::io::IoFormatError;
use crate::ops::{self, Padding};
use crate::tape::{Tape, TapeError, ValueId};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Node kinds admitted into a model graph. The set is closed: linear layers
/// plus nonlinearities with Lipschitz constant 1 under the `l2` norm.
#[derive(Debug, Clone)]
pub enum NodeKind<T: Scalar> {
    Conv2d {
        kernel: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: (usize, usize),
        padding: Padding,
    },
    BatchNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        moving_mean: Tensor<T>,
        moving_var: Tensor<T>,
        eps: f64,
    },
    FullyConnected {
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    Relu,
    MaxPool {
        window: (usize, usize),
        stride: (usize, usize),
    },
    AvgPool {
        window: (usize, usize),
        stride: (usize, usize),
    },
    ResidualAdd,
    Concat,
    Flatten,
}

impl<T: Scalar> NodeKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Conv2d { .. } => "conv2d",
            NodeKind::BatchNorm { .. } => "batchnorm",
            NodeKind::FullyConnected { .. } => "fully_connected",
            NodeKind::Relu => "relu",
            NodeKind::MaxPool { .. } => "maxpool",
            NodeKind::AvgPool { .. } => "avgpool",
            NodeKind::ResidualAdd => "residual_add",
            NodeKind::Concat => "concat",
            NodeKind::Flatten => "flatten",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            NodeKind::Conv2d { .. } | NodeKind::BatchNorm { .. } | NodeKind::FullyConnected { .. }
        )
    }
}

/// One layer in the graph, with cached per-image geometry.
#[derive(Debug, Clone)]
pub struct LayerNode<T: Scalar> {
    pub id: String,
    pub kind: NodeKind<T>,
    pub inputs: Vec<String>,
    /// Per-image input shapes (no batch axis), one per input edge.
    pub in_shapes: Vec<Vec<usize>>,
    /// Per-image output shape.
    pub out_shape: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Io(#[from] IoFormatError),
    #[error("manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error("node {node}: missing parameter blob {path}")]
    MissingBlob { node: String, path: String },
    #[error("node {node}: kind '{kind}' is outside the certified layer set")]
    StructureViolation { node: String, kind: String },
    #[error("duplicate node id '{0}'")]
    DuplicateId(String),
    #[error("node id 'input' is reserved for the graph input")]
    ReservedId,
    #[error("node {node} references unknown input '{reference}'")]
    UnknownInput { node: String, reference: String },
    #[error("graph has a cycle through nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("graph must have exactly one output, found {0:?}")]
    OutputCount(Vec<String>),
    #[error("node {node} expects {expected} inputs, got {got}")]
    Arity {
        node: String,
        expected: String,
        got: usize,
    },
    #[error("node {node}: {source}")]
    Shape {
        node: String,
        #[source]
        source: TensorError,
    },
    #[error("output shape {got:?} does not produce {expected} classes")]
    ClassCount { expected: usize, got: Vec<usize> },
    #[error("model input expects {expected:?} (optionally batched), got {got:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Structural role of a node kind in the certified vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructureRole {
    /// Carries a weight operator the attack can align with.
    Linear,
    /// Certified 1-Lipschitz nonlinearity or rearrangement.
    UnitLipschitz,
    /// Not in the certified set; the graph is rejected.
    Violation,
}

/// Classifies a node-kind name against the certified vocabulary.
pub fn classify_kind(kind: &str) -> StructureRole {
    match kind {
        "conv2d" | "batchnorm" | "fully_connected" => StructureRole::Linear,
        "relu" | "maxpool" | "avgpool" | "residual_add" | "concat" | "flatten" => {
            StructureRole::UnitLipschitz
        }
        _ => StructureRole::Violation,
    }
}

#[derive(Debug, Clone)]
pub struct StructureEntry {
    pub node_id: String,
    pub kind: String,
    pub role: StructureRole,
}

/// Per-node certification that the graph is linear layers plus 1-Lipschitz
/// nonlinearities.
#[derive(Debug, Clone)]
pub struct StructureReport {
    pub entries: Vec<StructureEntry>,
}

impl StructureReport {
    pub fn passed(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.role != StructureRole::Violation)
    }

    pub fn violations(&self) -> Vec<&StructureEntry> {
        self.entries
            .iter()
            .filter(|e| e.role == StructureRole::Violation)
            .collect()
    }
}

/// Validated single-input single-output layer graph.
#[derive(Debug, Clone)]
pub struct ModelGraph<T: Scalar> {
    nodes: Vec<LayerNode<T>>,
    index: HashMap<String, usize>,
    input_shape: Vec<usize>,
    class_count: usize,
    linear_order: Vec<String>,
    output_id: String,
}

/// Result of a forward pass: logits plus the input snapshot of every linear
/// layer, aligned with `linear_layer_order`. Snapshots keep the batch axis.
#[derive(Debug, Clone)]
pub struct ForwardPass<T: Scalar> {
    pub logits: Tensor<T>,
    pub snapshots: Vec<Tensor<T>>,
}

/// Where a taped forward takes its parameters from.
pub enum ParamSource<'a> {
    /// Parameters are recorded as constants (no gradients).
    Constants,
    /// Parameters are pre-registered tape leaves (training).
    Leaves(&'a HashMap<(usize, ParamSlot), ValueId>),
}

/// Identifies one parameter tensor of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamSlot {
    ConvKernel,
    ConvBias,
    Gamma,
    Beta,
    FcWeight,
    FcBias,
}

/// Batch-normalization behavior during a taped forward.
pub enum BnMode {
    /// Use the stored moving statistics (a per-channel affine map).
    Inference,
    /// Normalize with the current batch statistics (treated as constants for
    /// differentiation) and report updated moving averages.
    Training { momentum: f64 },
}

/// Output of [`ModelGraph::forward_on_tape`].
pub struct TapedForward<T: Scalar> {
    pub logits: ValueId,
    /// Tape value of each linear layer's input, aligned with
    /// `linear_layer_order`.
    pub linear_inputs: Vec<ValueId>,
    /// `(node_index, new_moving_mean, new_moving_var)` for each BatchNorm
    /// when running in training mode.
    pub bn_updates: Vec<(usize, Tensor<T>, Tensor<T>)>,
}

const INPUT_REF: &str = "input";

impl<T: Scalar> ModelGraph<T> {
    /// Validates and builds a graph from raw nodes.
    ///
    /// Checks performed: unique ids, known arities, acyclicity (Kahn
    /// toposort, stable by declaration order), a single output node, shape
    /// consistency of every edge, and that the output carries `class_count`
    /// logits.
    pub fn new(
        nodes: Vec<(String, NodeKind<T>, Vec<String>)>,
        input_shape: Vec<usize>,
        class_count: usize,
    ) -> Result<Self, ModelError> {
        if class_count == 0 {
            return Err(ModelError::ClassCount {
                expected: 1,
                got: vec![],
            });
        }
        let mut ids = HashSet::new();
        for (id, _, _) in &nodes {
            if id == INPUT_REF {
                return Err(ModelError::ReservedId);
            }
            if !ids.insert(id.clone()) {
                return Err(ModelError::DuplicateId(id.clone()));
            }
        }
        for (id, kind, inputs) in &nodes {
            let ok = match kind {
                NodeKind::ResidualAdd | NodeKind::Concat => inputs.len() >= 2,
                _ => inputs.len() == 1,
            };
            if !ok {
                return Err(ModelError::Arity {
                    node: id.clone(),
                    expected: match kind {
                        NodeKind::ResidualAdd | NodeKind::Concat => ">=2".into(),
                        _ => "1".into(),
                    },
                    got: inputs.len(),
                });
            }
            for reference in inputs {
                if reference != INPUT_REF && !ids.contains(reference) {
                    return Err(ModelError::UnknownInput {
                        node: id.clone(),
                        reference: reference.clone(),
                    });
                }
            }
        }

        // Kahn toposort, FIFO by declaration order for determinism.
        let id_to_idx: HashMap<&str, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, (id, _, _))| (id.as_str(), i))
            .collect();
        let mut indegree: Vec<usize> = nodes
            .iter()
            .map(|(_, _, inputs)| inputs.iter().filter(|r| *r != INPUT_REF).count())
            .collect();
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        for (i, (_, _, inputs)) in nodes.iter().enumerate() {
            for reference in inputs {
                if reference != INPUT_REF {
                    dependents[id_to_idx[reference.as_str()]].push(i);
                }
            }
        }
        let mut ready: Vec<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
        ready.sort_unstable();
        let mut order = Vec::with_capacity(nodes.len());
        let mut queue = std::collections::VecDeque::from(ready);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for &d in &dependents[i] {
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    queue.push_back(d);
                }
            }
        }
        if order.len() != nodes.len() {
            let stuck: Vec<String> = indegree
                .iter()
                .enumerate()
                .filter(|(_, &deg)| deg > 0)
                .map(|(i, _)| nodes[i].0.clone())
                .collect();
            return Err(ModelError::Cycle(stuck));
        }

        // Single output: exactly one node that nobody consumes.
        let consumed: HashSet<&str> = nodes
            .iter()
            .flat_map(|(_, _, inputs)| inputs.iter())
            .filter(|r| r.as_str() != INPUT_REF)
            .map(|r| r.as_str())
            .collect();
        let sinks: Vec<String> = nodes
            .iter()
            .filter(|(id, _, _)| !consumed.contains(id.as_str()))
            .map(|(id, _, _)| id.clone())
            .collect();
        if sinks.len() != 1 {
            return Err(ModelError::OutputCount(sinks));
        }
        let output_id = sinks[0].clone();

        // Shape inference along the topological order.
        let mut shapes: HashMap<String, Vec<usize>> = HashMap::new();
        shapes.insert(INPUT_REF.to_string(), input_shape.clone());
        let mut built: Vec<LayerNode<T>> = Vec::with_capacity(nodes.len());
        let reordered: Vec<(String, NodeKind<T>, Vec<String>)> = {
            let mut tmp: Vec<Option<(String, NodeKind<T>, Vec<String>)>> =
                nodes.into_iter().map(Some).collect();
            order
                .iter()
                .map(|&i| tmp[i].take().expect("toposort visits once"))
                .collect()
        };
        for (id, kind, inputs) in reordered {
            let in_shapes: Vec<Vec<usize>> =
                inputs.iter().map(|r| shapes[r.as_str()].clone()).collect();
            let out_shape = infer_shape(&id, &kind, &in_shapes)
                .map_err(|source| ModelError::Shape { node: id.clone(), source })?;
            shapes.insert(id.clone(), out_shape.clone());
            built.push(LayerNode {
                id,
                kind,
                inputs,
                in_shapes,
                out_shape,
            });
        }

        let out_shape = &shapes[output_id.as_str()];
        if out_shape != &vec![class_count] {
            return Err(ModelError::ClassCount {
                expected: class_count,
                got: out_shape.clone(),
            });
        }

        let linear_order: Vec<String> = built
            .iter()
            .filter(|n| n.kind.is_linear())
            .map(|n| n.id.clone())
            .collect();
        let index = built
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
        Ok(ModelGraph {
            nodes: built,
            index,
            input_shape,
            class_count,
            linear_order,
            output_id,
        })
    }

    pub fn nodes(&self) -> &[LayerNode<T>] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode<T>> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// All trainable parameter slots, in node order.
    pub fn param_slots(&self) -> Vec<(usize, ParamSlot)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.kind {
                NodeKind::Conv2d { bias, .. } => {
                    out.push((i, ParamSlot::ConvKernel));
                    if bias.is_some() {
                        out.push((i, ParamSlot::ConvBias));
                    }
                }
                NodeKind::BatchNorm { .. } => {
                    out.push((i, ParamSlot::Gamma));
                    out.push((i, ParamSlot::Beta));
                }
                NodeKind::FullyConnected { bias, .. } => {
                    out.push((i, ParamSlot::FcWeight));
                    if bias.is_some() {
                        out.push((i, ParamSlot::FcBias));
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn param(&self, index: usize, slot: ParamSlot) -> &Tensor<T> {
        match (&self.nodes[index].kind, slot) {
            (NodeKind::Conv2d { kernel, .. }, ParamSlot::ConvKernel) => kernel,
            (NodeKind::Conv2d { bias: Some(b), .. }, ParamSlot::ConvBias) => b,
            (NodeKind::BatchNorm { gamma, .. }, ParamSlot::Gamma) => gamma,
            (NodeKind::BatchNorm { beta, .. }, ParamSlot::Beta) => beta,
            (NodeKind::FullyConnected { weight, .. }, ParamSlot::FcWeight) => weight,
            (NodeKind::FullyConnected { bias: Some(b), .. }, ParamSlot::FcBias) => b,
            _ => panic!("node {index} has no slot {slot:?}"),
        }
    }

    pub fn param_mut(&mut self, index: usize, slot: ParamSlot) -> &mut Tensor<T> {
        match (&mut self.nodes[index].kind, slot) {
            (NodeKind::Conv2d { kernel, .. }, ParamSlot::ConvKernel) => kernel,
            (NodeKind::Conv2d { bias: Some(b), .. }, ParamSlot::ConvBias) => b,
            (NodeKind::BatchNorm { gamma, .. }, ParamSlot::Gamma) => gamma,
            (NodeKind::BatchNorm { beta, .. }, ParamSlot::Beta) => beta,
            (NodeKind::FullyConnected { weight, .. }, ParamSlot::FcWeight) => weight,
            (NodeKind::FullyConnected { bias: Some(b), .. }, ParamSlot::FcBias) => b,
            _ => panic!("node {index} has no slot {slot:?}"),
        }
    }

    /// Replaces a BatchNorm node's moving statistics.
    pub fn set_bn_stats(&mut self, index: usize, mean: Tensor<T>, var: Tensor<T>) {
        match &mut self.nodes[index].kind {
            NodeKind::BatchNorm {
                moving_mean,
                moving_var,
                ..
            } => {
                *moving_mean = mean;
                *moving_var = var;
            }
            _ => panic!("node {index} is not a batchnorm"),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn output_id(&self) -> &str {
        &self.output_id
    }

    /// Ids of all linear layers in forward-traversal order.
    pub fn linear_layer_order(&self) -> &[String] {
        &self.linear_order
    }

    /// Certifies that every node kind belongs to the admitted vocabulary.
    /// Valid graphs pass by construction; the report lists each node's role.
    pub fn validate_structure(&self) -> StructureReport {
        StructureReport {
            entries: self
                .nodes
                .iter()
                .map(|n| StructureEntry {
                    node_id: n.id.clone(),
                    kind: n.kind.name().to_string(),
                    role: classify_kind(n.kind.name()),
                })
                .collect(),
        }
    }

    fn batched_input(&self, input: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let shape = input.shape();
        if shape == self.input_shape.as_slice() {
            let mut batched = vec![1];
            batched.extend_from_slice(&self.input_shape);
            return Ok(input.reshape(&batched)?);
        }
        if shape.len() == self.input_shape.len() + 1 && shape[1..] == self.input_shape[..] {
            return Ok(input.clone());
        }
        Err(ModelError::InputShape {
            expected: self.input_shape.clone(),
            got: shape.to_vec(),
        })
    }

    /// Pure forward pass. Accepts a single image shaped like `input_shape`
    /// or a batch with a leading `N` axis; logits are always `[N, classes]`.
    pub fn forward(&self, input: &Tensor<T>) -> Result<ForwardPass<T>, ModelError> {
        let input = self.batched_input(input)?;
        let n = input.shape()[0];
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut snapshots = Vec::with_capacity(self.linear_order.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let fetch = |r: &String| -> &Tensor<T> {
                if r == INPUT_REF {
                    &input
                } else {
                    values[self.index[r.as_str()]]
                        .as_ref()
                        .expect("toposorted order guarantees availability")
                }
            };
            if node.kind.is_linear() {
                snapshots.push(fetch(&node.inputs[0]).clone());
            }
            let out = match &node.kind {
                NodeKind::Conv2d {
                    kernel,
                    bias,
                    stride,
                    padding,
                } => ops::conv2d(fetch(&node.inputs[0]), kernel, bias.as_ref(), *stride, *padding),
                NodeKind::BatchNorm {
                    gamma,
                    beta,
                    moving_mean,
                    moving_var,
                    eps,
                } => ops::batchnorm_inference(
                    fetch(&node.inputs[0]),
                    gamma,
                    beta,
                    moving_mean,
                    moving_var,
                    *eps,
                ),
                NodeKind::FullyConnected { weight, bias } => {
                    ops::fully_connected(fetch(&node.inputs[0]), weight, bias.as_ref())
                }
                NodeKind::Relu => Ok(ops::relu(fetch(&node.inputs[0]))),
                NodeKind::MaxPool { window, stride } => {
                    ops::maxpool2d(fetch(&node.inputs[0]), *window, *stride).map(|(t, _)| t)
                }
                NodeKind::AvgPool { window, stride } => {
                    ops::avgpool2d(fetch(&node.inputs[0]), *window, *stride)
                }
                NodeKind::ResidualAdd => {
                    let mut acc = fetch(&node.inputs[0]).clone();
                    for r in &node.inputs[1..] {
                        acc = acc.add(fetch(r))?;
                    }
                    Ok(acc)
                }
                NodeKind::Concat => {
                    let parts: Vec<&Tensor<T>> = node.inputs.iter().map(fetch).collect();
                    ops::concat_channels(&parts)
                }
                NodeKind::Flatten => {
                    let t = fetch(&node.inputs[0]);
                    let rest: usize = t.shape()[1..].iter().product();
                    t.reshape(&[n, rest])
                }
            }
            .map_err(|source| ModelError::Shape {
                node: node.id.clone(),
                source,
            })?;
            values[i] = Some(out);
        }
        let logits = values[self.index[self.output_id.as_str()]]
            .take()
            .expect("output computed");
        Ok(ForwardPass { logits, snapshots })
    }

    /// Forward pass recorded on a tape, so gradients can flow to the input
    /// leaf and, when `params` provides leaves, to the parameters.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        input: ValueId,
        params: ParamSource<'_>,
        bn: BnMode,
    ) -> Result<TapedForward<T>, ModelError> {
        let n = {
            let shape = tape.value(input).shape();
            if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
                return Err(ModelError::InputShape {
                    expected: self.input_shape.clone(),
                    got: shape.to_vec(),
                });
            }
            shape[0]
        };
        let mut values: Vec<Option<ValueId>> = vec![None; self.nodes.len()];
        let mut linear_inputs = Vec::with_capacity(self.linear_order.len());
        let mut bn_updates = Vec::new();
        let get_param = |tape: &mut Tape<T>,
                         params: &ParamSource<'_>,
                         node_idx: usize,
                         slot: ParamSlot,
                         tensor: &Tensor<T>|
         -> ValueId {
            match params {
                ParamSource::Constants => tape.constant(tensor.clone()),
                ParamSource::Leaves(map) => map
                    .get(&(node_idx, slot))
                    .copied()
                    .unwrap_or_else(|| panic!("missing parameter leaf for node {node_idx}")),
            }
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let fetch = |r: &String| -> ValueId {
                if r == INPUT_REF {
                    input
                } else {
                    values[self.index[r.as_str()]].expect("toposorted order")
                }
            };
            let node_in = fetch(&node.inputs[0]);
            if node.kind.is_linear() {
                linear_inputs.push(node_in);
            }
            let out = match &node.kind {
                NodeKind::Conv2d {
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let k = get_param(tape, &params, i, ParamSlot::ConvKernel, kernel);
                    let b = bias
                        .as_ref()
                        .map(|b| get_param(tape, &params, i, ParamSlot::ConvBias, b));
                    tape.conv2d(node_in, k, b, *stride, *padding)
                }
                NodeKind::BatchNorm {
                    gamma,
                    beta,
                    moving_mean,
                    moving_var,
                    eps,
                } => {
                    let g = get_param(tape, &params, i, ParamSlot::Gamma, gamma);
                    let b = get_param(tape, &params, i, ParamSlot::Beta, beta);
                    match &bn {
                        BnMode::Inference => {
                            let mean = tape.constant(moving_mean.clone());
                            let var = tape.constant(moving_var.clone());
                            tape.batchnorm_inference(node_in, g, b, mean, var, *eps)
                        }
                        BnMode::Training { momentum } => {
                            // Normalize by the batch statistics; the stats are
                            // constants on the tape (stop-gradient), so grads
                            // flow through the affine map only.
                            let (batch_mean, batch_var) =
                                ops::batch_statistics(tape.value(node_in));
                            let count = {
                                let s = tape.value(node_in).shape();
                                (s[0] * s[2] * s[3]) as f64
                            };
                            let m = T::from_f64(*momentum);
                            let keep = T::ONE - m;
                            // PyTorch convention: unbiased variance feeds the
                            // moving average, biased variance normalizes.
                            let bessel = if count > 1.0 {
                                T::from_f64(count / (count - 1.0))
                            } else {
                                T::ONE
                            };
                            let new_mean = moving_mean
                                .zip_map(&batch_mean, |old, new| old * keep + new * m)?;
                            let new_var = moving_var
                                .zip_map(&batch_var, |old, new| old * keep + new * bessel * m)?;
                            bn_updates.push((i, new_mean, new_var));
                            let mean = tape.constant(batch_mean);
                            let var = tape.constant(batch_var);
                            tape.batchnorm_inference(node_in, g, b, mean, var, *eps)
                        }
                    }
                }
                NodeKind::FullyConnected { weight, bias } => {
                    let w = get_param(tape, &params, i, ParamSlot::FcWeight, weight);
                    let b = bias
                        .as_ref()
                        .map(|b| get_param(tape, &params, i, ParamSlot::FcBias, b));
                    tape.fully_connected(node_in, w, b)
                }
                NodeKind::Relu => Ok(tape.relu(node_in)),
                NodeKind::MaxPool { window, stride } => tape.maxpool2d(node_in, *window, *stride),
                NodeKind::AvgPool { window, stride } => tape.avgpool2d(node_in, *window, *stride),
                NodeKind::ResidualAdd => {
                    let mut acc = node_in;
                    for r in &node.inputs[1..] {
                        acc = tape.add(acc, fetch(r))?;
                    }
                    Ok(acc)
                }
                NodeKind::Concat => {
                    let parts: Vec<ValueId> = node.inputs.iter().map(fetch).collect();
                    tape.concat_channels(&parts)
                }
                NodeKind::Flatten => {
                    let rest: usize = tape.value(node_in).shape()[1..].iter().product();
                    tape.reshape(node_in, &[n, rest])
                }
            }
            .map_err(|source| ModelError::Shape {
                node: node.id.clone(),
                source,
            })?;
            values[i] = Some(out);
        }
        Ok(TapedForward {
            logits: values[self.index[self.output_id.as_str()]].expect("output computed"),
            linear_inputs,
            bn_updates,
        })
    }
}

fn infer_shape<T: Scalar>(
    id: &str,
    kind: &NodeKind<T>,
    in_shapes: &[Vec<usize>],
) -> Result<Vec<usize>, TensorError> {
    let single = || -> Result<&Vec<usize>, TensorError> {
        in_shapes.first().ok_or_else(|| {
            TensorError::InvalidParameter(format!("node {id} has no inputs"))
        })
    };
    let as_chw = |s: &Vec<usize>| -> Result<(usize, usize, usize), TensorError> {
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                context: format!("node {id}: expected [C,H,W] input"),
                expected: vec![3],
                got: s.clone(),
            });
        }
        Ok((s[0], s[1], s[2]))
    };
    match kind {
        NodeKind::Conv2d {
            kernel,
            bias,
            stride,
            padding,
        } => {
            let (c, h, w) = as_chw(single()?)?;
            let ks = kernel.shape();
            if ks.len() != 4 || ks[1] != c {
                return Err(TensorError::ShapeMismatch {
                    context: format!("node {id}: kernel channels"),
                    expected: vec![c],
                    got: ks.to_vec(),
                });
            }
            if let Some(b) = bias {
                if b.shape() != [ks[0]] {
                    return Err(TensorError::ShapeMismatch {
                        context: format!("node {id}: bias length"),
                        expected: vec![ks[0]],
                        got: b.shape().to_vec(),
                    });
                }
            }
            let (ho, wo) = ops::conv_output_dims((h, w), (ks[2], ks[3]), *stride, *padding)?;
            Ok(vec![ks[0], ho, wo])
        }
        NodeKind::BatchNorm {
            gamma,
            beta,
            moving_mean,
            moving_var,
            eps,
        } => {
            let (c, h, w) = as_chw(single()?)?;
            crate::ops::batchnorm_check(c, gamma, beta, moving_mean, moving_var, *eps)?;
            Ok(vec![c, h, w])
        }
        NodeKind::FullyConnected { weight, bias } => {
            let s = single()?;
            if s.len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    context: format!("node {id}: fully_connected expects flattened input"),
                    expected: vec![1],
                    got: s.clone(),
                });
            }
            let ws = weight.shape();
            if ws.len() != 2 || ws[1] != s[0] {
                return Err(TensorError::ShapeMismatch {
                    context: format!("node {id}: weight columns"),
                    expected: vec![s[0]],
                    got: ws.to_vec(),
                });
            }
            if let Some(b) = bias {
                if b.shape() != [ws[0]] {
                    return Err(TensorError::ShapeMismatch {
                        context: format!("node {id}: bias length"),
                        expected: vec![ws[0]],
                        got: b.shape().to_vec(),
                    });
                }
            }
            Ok(vec![ws[0]])
        }
        NodeKind::Relu => Ok(single()?.clone()),
        NodeKind::MaxPool { window, stride } | NodeKind::AvgPool { window, stride } => {
            let (c, h, w) = as_chw(single()?)?;
            // Reuse the batched kernels' dimension rules via a probe shape.
            let probe = Tensor::<T>::zeros(&[1, c, h, w]);
            let pooled = ops::avgpool2d(&probe, *window, *stride)?;
            Ok(pooled.shape()[1..].to_vec())
        }
        NodeKind::ResidualAdd => {
            let first = single()?.clone();
            for s in in_shapes {
                if *s != first {
                    return Err(TensorError::ShapeMismatch {
                        context: format!("node {id}: residual_add inputs must agree"),
                        expected: first,
                        got: s.clone(),
                    });
                }
            }
            Ok(first)
        }
        NodeKind::Concat => {
            let (c0, h, w) = as_chw(single()?)?;
            let mut total = c0;
            for s in &in_shapes[1..] {
                let (c, hh, ww) = as_chw(s)?;
                if hh != h || ww != w {
                    return Err(TensorError::ShapeMismatch {
                        context: format!("node {id}: concat spatial dims"),
                        expected: vec![h, w],
                        got: vec![hh, ww],
                    });
                }
                total += c;
            }
            Ok(vec![total, h, w])
        }
        NodeKind::Flatten => {
            let s = single()?;
            Ok(vec![s.iter().product()])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{gaussian_tensor, rng_from_seed};

    fn conv_kind(
        kernel: Tensor<f64>,
        bias: Option<Tensor<f64>>,
        stride: (usize, usize),
        padding: Padding,
    ) -> NodeKind<f64> {
        NodeKind::Conv2d {
            kernel,
            bias,
            stride,
            padding,
        }
    }

    fn minimal_nodes() -> Vec<(String, NodeKind<f64>, Vec<String>)> {
        let mut rng = rng_from_seed(1);
        let kernel = gaussian_tensor::<f64>(&[2, 1, 3, 3], &mut rng);
        let weight = gaussian_tensor::<f64>(&[4, 2 * 4 * 4], &mut rng);
        vec![
            (
                "conv".into(),
                conv_kind(kernel, None, (1, 1), Padding::Zero(1, 1)),
                vec!["input".into()],
            ),
            ("relu".into(), NodeKind::Relu, vec!["conv".into()]),
            ("flat".into(), NodeKind::Flatten, vec!["relu".into()]),
            (
                "fc".into(),
                NodeKind::FullyConnected {
                    weight,
                    bias: None,
                },
                vec!["flat".into()],
            ),
        ]
    }

    #[test]
    fn minimal_graph_linear_order() {
        let model = ModelGraph::new(minimal_nodes(), vec![1, 4, 4], 4).unwrap();
        assert_eq!(model.linear_layer_order(), &["conv".to_string(), "fc".to_string()]);
        assert_eq!(model.output_id(), "fc");
        assert!(model.validate_structure().passed());
    }

    #[test]
    fn unknown_kind_is_a_structure_violation() {
        assert_eq!(classify_kind("sigmoid"), StructureRole::Violation);
        assert_eq!(classify_kind("relu"), StructureRole::UnitLipschitz);
        assert_eq!(classify_kind("conv2d"), StructureRole::Linear);
    }

    #[test]
    fn cycle_is_detected() {
        let mut rng = rng_from_seed(2);
        let k = gaussian_tensor::<f64>(&[1, 1, 1, 1], &mut rng);
        let nodes = vec![
            (
                "a".into(),
                conv_kind(k.clone(), None, (1, 1), Padding::Zero(0, 0)),
                vec!["b".into()],
            ),
            (
                "b".into(),
                NodeKind::ResidualAdd,
                vec!["a".into(), "input".into()],
            ),
        ];
        let err = ModelGraph::new(nodes, vec![1, 2, 2], 4).unwrap_err();
        assert!(matches!(err, ModelError::Cycle(_)), "got {err:?}");
    }

    #[test]
    fn duplicate_and_reserved_ids_rejected() {
        let nodes = vec![
            ("x".into(), NodeKind::<f64>::Relu, vec!["input".into()]),
            ("x".into(), NodeKind::Relu, vec!["x".into()]),
        ];
        assert!(matches!(
            ModelGraph::new(nodes, vec![4], 4).unwrap_err(),
            ModelError::DuplicateId(_)
        ));
        let nodes = vec![("input".into(), NodeKind::<f64>::Relu, vec!["input".into()])];
        assert!(matches!(
            ModelGraph::new(nodes, vec![4], 4).unwrap_err(),
            ModelError::ReservedId
        ));
    }

    #[test]
    fn zero_input_through_bias_free_net_gives_zero_logits() {
        let model = ModelGraph::new(minimal_nodes(), vec![1, 4, 4], 4).unwrap();
        let out = model.forward(&Tensor::zeros(&[1, 4, 4])).unwrap();
        assert_eq!(out.logits.shape(), &[1, 4]);
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_conv_logits_equal_fc_of_flattened_input() {
        // 1x1 identity conv -> flatten -> fc: logits = W . vec(x)
        let mut rng = rng_from_seed(3);
        let weight = gaussian_tensor::<f64>(&[3, 9], &mut rng);
        let nodes = vec![
            (
                "conv".into(),
                conv_kind(
                    Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
                    None,
                    (1, 1),
                    Padding::Zero(0, 0),
                ),
                vec!["input".into()],
            ),
            ("flat".into(), NodeKind::Flatten, vec!["conv".into()]),
            (
                "fc".into(),
                NodeKind::FullyConnected {
                    weight: weight.clone(),
                    bias: None,
                },
                vec!["flat".into()],
            ),
        ];
        let model = ModelGraph::new(nodes, vec![1, 3, 3], 3).unwrap();
        let x = gaussian_tensor::<f64>(&[1, 3, 3], &mut rng);
        let out = model.forward(&x).unwrap();
        for j in 0..3 {
            let want: f64 = (0..9).map(|i| weight.data()[j * 9 + i] * x.data()[i]).sum();
            assert!((out.logits.data()[j] - want).abs() < 1e-12);
        }
    }

    /// Residual block wiring: out = relu(bn2(conv2(relu(bn1(conv1(x)))))) + x.
    #[test]
    fn residual_block_composes_exactly() {
        let mut rng = rng_from_seed(4);
        let c = 2;
        let mk_bn = |rng: &mut _| NodeKind::BatchNorm {
            gamma: gaussian_tensor::<f64>(&[c], rng).map(|v| v.abs() + 0.5),
            beta: gaussian_tensor::<f64>(&[c], rng),
            moving_mean: gaussian_tensor::<f64>(&[c], rng),
            moving_var: gaussian_tensor::<f64>(&[c], rng).map(|v| v.abs() + 0.1),
            eps: 1e-5,
        };
        let k1 = gaussian_tensor::<f64>(&[c, c, 3, 3], &mut rng);
        let k2 = gaussian_tensor::<f64>(&[c, c, 3, 3], &mut rng);
        let bn1 = mk_bn(&mut rng);
        let bn2 = mk_bn(&mut rng);
        let weight = gaussian_tensor::<f64>(&[2, c * 4 * 4], &mut rng);
        let nodes = vec![
            (
                "c1".into(),
                conv_kind(k1.clone(), None, (1, 1), Padding::Zero(1, 1)),
                vec!["input".into()],
            ),
            ("n1".into(), bn1.clone(), vec!["c1".into()]),
            ("r1".into(), NodeKind::Relu, vec!["n1".into()]),
            (
                "c2".into(),
                conv_kind(k2.clone(), None, (1, 1), Padding::Zero(1, 1)),
                vec!["r1".into()],
            ),
            ("n2".into(), bn2.clone(), vec!["c2".into()]),
            ("r2".into(), NodeKind::Relu, vec!["n2".into()]),
            (
                "add".into(),
                NodeKind::ResidualAdd,
                vec!["r2".into(), "input".into()],
            ),
            ("flat".into(), NodeKind::Flatten, vec!["add".into()]),
            (
                "fc".into(),
                NodeKind::FullyConnected {
                    weight,
                    bias: None,
                },
                vec!["flat".into()],
            ),
        ];
        let model = ModelGraph::new(nodes, vec![c, 4, 4], 2).unwrap();
        let x = gaussian_tensor::<f64>(&[c, 4, 4], &mut rng);

        // Compose the branch by hand with the raw kernels.
        let xb = x.reshape(&[1, c, 4, 4]).unwrap();
        let apply_bn = |t: &Tensor<f64>, bn: &NodeKind<f64>| match bn {
            NodeKind::BatchNorm {
                gamma,
                beta,
                moving_mean,
                moving_var,
                eps,
            } => ops::batchnorm_inference(t, gamma, beta, moving_mean, moving_var, *eps).unwrap(),
            _ => unreachable!(),
        };
        let h = ops::conv2d(&xb, &k1, None, (1, 1), Padding::Zero(1, 1)).unwrap();
        let h = ops::relu(&apply_bn(&h, &bn1));
        let h = ops::conv2d(&h, &k2, None, (1, 1), Padding::Zero(1, 1)).unwrap();
        let h = ops::relu(&apply_bn(&h, &bn2));
        let want = h.add(&xb).unwrap();

        // The graph's "add" node carries the same value; reconstruct it from
        // the fc snapshot (input of the last linear layer, pre-flatten).
        let out = model.forward(&x).unwrap();
        let fc_snapshot = out.snapshots.last().unwrap();
        assert_eq!(fc_snapshot.data(), want.data());
    }

    #[test]
    fn snapshots_chain_through_consecutive_linear_layers() {
        // conv -> bn are adjacent linear layers: applying conv to its own
        // snapshot must reproduce bn's snapshot.
        let mut rng = rng_from_seed(5);
        let k = gaussian_tensor::<f64>(&[2, 1, 3, 3], &mut rng);
        let bias = gaussian_tensor::<f64>(&[2], &mut rng);
        let bn = NodeKind::BatchNorm {
            gamma: Tensor::full(&[2], 1.5),
            beta: Tensor::full(&[2], -0.25),
            moving_mean: Tensor::full(&[2], 0.1),
            moving_var: Tensor::full(&[2], 0.9),
            eps: 1e-5,
        };
        let weight = gaussian_tensor::<f64>(&[2, 2 * 4 * 4], &mut rng);
        let nodes = vec![
            (
                "conv".into(),
                conv_kind(k.clone(), Some(bias.clone()), (1, 1), Padding::Zero(1, 1)),
                vec!["input".into()],
            ),
            ("bn".into(), bn, vec!["conv".into()]),
            ("relu".into(), NodeKind::Relu, vec!["bn".into()]),
            ("flat".into(), NodeKind::Flatten, vec!["relu".into()]),
            (
                "fc".into(),
                NodeKind::FullyConnected { weight, bias: None },
                vec!["flat".into()],
            ),
        ];
        let model = ModelGraph::new(nodes, vec![1, 4, 4], 2).unwrap();
        let x = gaussian_tensor::<f64>(&[1, 4, 4], &mut rng);
        let out = model.forward(&x).unwrap();
        assert_eq!(out.snapshots.len(), 3);
        let replay = ops::conv2d(&out.snapshots[0], &k, Some(&bias), (1, 1), Padding::Zero(1, 1))
            .unwrap();
        assert_eq!(replay.data(), out.snapshots[1].data());
    }

    #[test]
    fn forward_is_pure_and_deterministic() {
        let model = ModelGraph::new(minimal_nodes(), vec![1, 4, 4], 4).unwrap();
        let mut rng = rng_from_seed(6);
        let x = gaussian_tensor::<f64>(&[1, 4, 4], &mut rng);
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a.logits, b.logits);
        for (s1, s2) in a.snapshots.iter().zip(&b.snapshots) {
            assert_eq!(s1, s2);
        }
    }

    #[test]
    fn taped_forward_matches_pure_forward() {
        let model = ModelGraph::new(minimal_nodes(), vec![1, 4, 4], 4).unwrap();
        let mut rng = rng_from_seed(7);
        let x = gaussian_tensor::<f64>(&[2, 1, 4, 4], &mut rng);
        let pure = model.forward(&x).unwrap();
        let mut tape = Tape::new();
        let x_id = tape.constant(x);
        let taped = model
            .forward_on_tape(&mut tape, x_id, ParamSource::Constants, BnMode::Inference)
            .unwrap();
        assert_eq!(tape.value(taped.logits), &pure.logits);
        assert_eq!(taped.linear_inputs.len(), pure.snapshots.len());
        for (&id, snap) in taped.linear_inputs.iter().zip(&pure.snapshots) {
            assert_eq!(tape.value(id), snap);
        }
    }

    #[test]
    fn manifest_roundtrip_is_bit_exact() {
        let model = ModelGraph::new(minimal_nodes(), vec![1, 4, 4], 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a");
        std::fs::create_dir_all(&first).unwrap();
        let manifest = save_model(&model, "mini", &first).unwrap();
        let loaded: ModelGraph<f64> = load_model(&manifest).unwrap();
        assert_eq!(loaded.linear_layer_order(), model.linear_layer_order());
        let second = dir.path().join("b");
        std::fs::create_dir_all(&second).unwrap();
        save_model(&loaded, "mini", &second).unwrap();
        // Every emitted file must be byte-identical across the round-trip.
        for entry in walk(&first) {
            let rel = entry.strip_prefix(&first).unwrap();
            let a = std::fs::read(&entry).unwrap();
            let b = std::fs::read(second.join(rel)).unwrap();
            assert_eq!(a, b, "file {rel:?} differs after load-save");
        }
    }

    fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.push(path);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn manifest_with_unsupported_kind_fails_structurally() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.toml");
        std::fs::write(
            &manifest,
            r#"
format = "layer-graph/1"
name = "bad"
dtype = "f64"
input_shape = [4]
class_count = 4

[[node]]
id = "act"
kind = "sigmoid"
inputs = ["input"]
"#,
        )
        .unwrap();
        let err = load_model::<f64>(&manifest).unwrap_err();
        match err {
            ModelError::StructureViolation { node, kind } => {
                assert_eq!(node, "act");
                assert_eq!(kind, "sigmoid");
            }
            other => panic!("expected structure violation, got {other:?}"),
        }
    }

    #[test]
    fn manifest_with_missing_blob_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.toml");
        std::fs::write(
            &manifest,
            r#"
format = "layer-graph/1"
name = "bad"
dtype = "f64"
input_shape = [1, 2, 2]
class_count = 4

[[node]]
id = "conv"
kind = "conv2d"
inputs = ["input"]
stride = [1, 1]
padding = "zero"
pad = [0, 0]

[node.params]
kernel = "blobs/conv.kernel.ntsr"
"#,
        )
        .unwrap();
        let err = load_model::<f64>(&manifest).unwrap_err();
        assert!(matches!(err, ModelError::MissingBlob { .. }), "got {err:?}");
    }

    #[test]
    fn multiple_outputs_rejected() {
        let nodes = vec![
            ("a".into(), NodeKind::<f64>::Relu, vec!["input".into()]),
            ("b".into(), NodeKind::Relu, vec!["input".into()]),
        ];
        assert!(matches!(
            ModelGraph::new(nodes, vec![4], 4).unwrap_err(),
            ModelError::OutputCount(_)
        ));
    }

    #[test]
    fn batch_and_single_image_forward_agree() {
        let model = ModelGraph::new(minimal_nodes(), vec![1, 4, 4], 4).unwrap();
        let mut rng = rng_from_seed(8);
        let x = gaussian_tensor::<f64>(&[1, 4, 4], &mut rng);
        let single = model.forward(&x).unwrap();
        let batched = model
            .forward(&x.reshape(&[1, 1, 4, 4]).unwrap())
            .unwrap();
        assert_eq!(single.logits, batched.logits);
    }
}
