//! Model manifests: a TOML document plus NTSR1 parameter blobs.
//!
//! The manifest is deliberately framework-free and diffable. Node parameters
//! are referenced by relative path; `save_model` writes blobs under
//! `blobs/<node>.<slot>.ntsr` and emits nodes in topological order, so
//! load-then-save round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{classify_kind, ModelError, ModelGraph, NodeKind, StructureRole};
use crate::io::{read_ntsr1, write_ntsr1};
use crate::ops::Padding;
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST_FORMAT: &str = "layer-graph/1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDoc {
    format: String,
    name: String,
    dtype: String,
    input_shape: Vec<usize>,
    class_count: usize,
    #[serde(rename = "node", default)]
    nodes: Vec<NodeDoc>,
}

#[derive(Debug, Serialize, Deserialize, Default)]
struct NodeDoc {
    id: String,
    kind: String,
    inputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    padding: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pad: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    window: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    /// Blob paths relative to the manifest directory, keyed by slot name.
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<BTreeMap<String, String>>,
}

fn manifest_err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Manifest {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn load_blob<T: Scalar>(
    dir: &Path,
    node: &str,
    params: &Option<BTreeMap<String, String>>,
    slot: &str,
) -> Result<Option<Tensor<T>>, ModelError> {
    let Some(rel) = params.as_ref().and_then(|m| m.get(slot)) else {
        return Ok(None);
    };
    let path = dir.join(rel);
    if !path.exists() {
        return Err(ModelError::MissingBlob {
            node: node.to_string(),
            path: path.display().to_string(),
        });
    }
    Ok(Some(read_ntsr1::<T>(&path)?))
}

fn require_blob<T: Scalar>(
    dir: &Path,
    node: &str,
    params: &Option<BTreeMap<String, String>>,
    slot: &str,
    manifest: &Path,
) -> Result<Tensor<T>, ModelError> {
    load_blob(dir, node, params, slot)?
        .ok_or_else(|| manifest_err(manifest, format!("node {node}: missing '{slot}' parameter")))
}

/// Loads and fully validates a model from its manifest path.
pub fn load_model<T: Scalar>(manifest_path: &Path) -> Result<ModelGraph<T>, ModelError> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| crate::io::IoFormatError::io(manifest_path, e))?;
    let doc: ManifestDoc =
        toml::from_str(&text).map_err(|e| manifest_err(manifest_path, e.to_string()))?;
    if doc.format != MANIFEST_FORMAT {
        return Err(manifest_err(
            manifest_path,
            format!("unsupported format '{}'", doc.format),
        ));
    }
    if doc.dtype != T::DTYPE.name() {
        return Err(manifest_err(
            manifest_path,
            format!("manifest dtype {} does not match requested {}", doc.dtype, T::DTYPE.name()),
        ));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for nd in &doc.nodes {
        if classify_kind(&nd.kind) == StructureRole::Violation {
            return Err(ModelError::StructureViolation {
                node: nd.id.clone(),
                kind: nd.kind.clone(),
            });
        }
        let stride = nd.stride.map(|[a, b]| (a, b));
        let window = nd.window.map(|[a, b]| (a, b));
        let kind: NodeKind<T> = match nd.kind.as_str() {
            "conv2d" => {
                let stride = stride.unwrap_or((1, 1));
                let (ph, pw) = nd.pad.map(|[a, b]| (a, b)).unwrap_or((0, 0));
                let padding = match nd.padding.as_deref().unwrap_or("zero") {
                    "zero" => Padding::Zero(ph, pw),
                    "circular" => Padding::Circular(ph, pw),
                    other => {
                        return Err(manifest_err(
                            manifest_path,
                            format!("node {}: unknown padding mode '{other}'", nd.id),
                        ))
                    }
                };
                NodeKind::Conv2d {
                    kernel: require_blob(dir, &nd.id, &nd.params, "kernel", manifest_path)?,
                    bias: load_blob(dir, &nd.id, &nd.params, "bias")?,
                    stride,
                    padding,
                }
            }
            "batchnorm" => NodeKind::BatchNorm {
                gamma: require_blob(dir, &nd.id, &nd.params, "gamma", manifest_path)?,
                beta: require_blob(dir, &nd.id, &nd.params, "beta", manifest_path)?,
                moving_mean: require_blob(dir, &nd.id, &nd.params, "moving_mean", manifest_path)?,
                moving_var: require_blob(dir, &nd.id, &nd.params, "moving_var", manifest_path)?,
                eps: nd.eps.unwrap_or(1e-5),
            },
            "fully_connected" => NodeKind::FullyConnected {
                weight: require_blob(dir, &nd.id, &nd.params, "weight", manifest_path)?,
                bias: load_blob(dir, &nd.id, &nd.params, "bias")?,
            },
            "relu" => NodeKind::Relu,
            "maxpool" | "avgpool" => {
                let window = window.ok_or_else(|| {
                    manifest_err(manifest_path, format!("node {}: missing window", nd.id))
                })?;
                let stride = stride.unwrap_or(window);
                if nd.kind == "maxpool" {
                    NodeKind::MaxPool { window, stride }
                } else {
                    NodeKind::AvgPool { window, stride }
                }
            }
            "residual_add" => NodeKind::ResidualAdd,
            "concat" => NodeKind::Concat,
            "flatten" => NodeKind::Flatten,
            other => {
                return Err(ModelError::StructureViolation {
                    node: nd.id.clone(),
                    kind: other.to_string(),
                })
            }
        };
        nodes.push((nd.id.clone(), kind, nd.inputs.clone()));
    }
    ModelGraph::new(nodes, doc.input_shape, doc.class_count)
}

/// Writes `dir/manifest.toml` plus `dir/blobs/*.ntsr` in canonical form.
pub fn save_model<T: Scalar>(
    model: &ModelGraph<T>,
    name: &str,
    dir: &Path,
) -> Result<PathBuf, ModelError> {
    let blob_dir = dir.join("blobs");
    fs::create_dir_all(&blob_dir).map_err(|e| crate::io::IoFormatError::io(&blob_dir, e))?;

    let mut docs = Vec::with_capacity(model.nodes().len());
    for node in model.nodes() {
        let mut nd = NodeDoc {
            id: node.id.clone(),
            kind: node.kind.name().to_string(),
            inputs: node.inputs.clone(),
            ..NodeDoc::default()
        };
        let mut params = BTreeMap::new();
        let mut blob = |slot: &str, tensor: &Tensor<T>| -> Result<(), ModelError> {
            let rel = format!("blobs/{}.{}.ntsr", node.id, slot);
            write_ntsr1(&dir.join(&rel), tensor)?;
            params.insert(slot.to_string(), rel);
            Ok(())
        };
        match &node.kind {
            NodeKind::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => {
                nd.stride = Some([stride.0, stride.1]);
                let (mode, (ph, pw)) = match padding {
                    Padding::Zero(h, w) => ("zero", (*h, *w)),
                    Padding::Circular(h, w) => ("circular", (*h, *w)),
                };
                nd.padding = Some(mode.to_string());
                nd.pad = Some([ph, pw]);
                blob("kernel", kernel)?;
                if let Some(b) = bias {
                    blob("bias", b)?;
                }
            }
            NodeKind::BatchNorm {
                gamma,
                beta,
                moving_mean,
                moving_var,
                eps,
            } => {
                nd.eps = Some(*eps);
                blob("gamma", gamma)?;
                blob("beta", beta)?;
                blob("moving_mean", moving_mean)?;
                blob("moving_var", moving_var)?;
            }
            NodeKind::FullyConnected { weight, bias } => {
                blob("weight", weight)?;
                if let Some(b) = bias {
                    blob("bias", b)?;
                }
            }
            NodeKind::MaxPool { window, stride } | NodeKind::AvgPool { window, stride } => {
                nd.window = Some([window.0, window.1]);
                nd.stride = Some([stride.0, stride.1]);
            }
            NodeKind::Relu | NodeKind::ResidualAdd | NodeKind::Concat | NodeKind::Flatten => {}
        }
        if !params.is_empty() {
            nd.params = Some(params);
        }
        docs.push(nd);
    }

    let doc = ManifestDoc {
        format: MANIFEST_FORMAT.to_string(),
        name: name.to_string(),
        dtype: T::DTYPE.name().to_string(),
        input_shape: model.input_shape().to_vec(),
        class_count: model.class_count(),
        nodes: docs,
    };
    let manifest_path = dir.join("manifest.toml");
    let text = toml::to_string(&doc)
        .map_err(|e| manifest_err(&manifest_path, e.to_string()))?;
    fs::write(&manifest_path, text)
        .map_err(|e| crate::io::IoFormatError::io(&manifest_path, e))?;
    Ok(manifest_path)
}
