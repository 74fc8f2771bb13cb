//! Reverse-mode differentiation over the fixed layer vocabulary.
//!
//! A [`Tape`] records primitive operations in execution order; because every
//! operation's inputs are created before it, the recorded order is already
//! topological and the backward pass is a single reverse sweep that visits
//! each node exactly once.
//!
//! Subgradient conventions (fixed for determinism): ReLU takes 0 at the
//! kink, `abs` takes +1 at the kink, max-pooling routes ties to the first
//! maximal element in row-major order.

use std::collections::HashMap;

use thiserror::Error;

use crate::ops::{self, Padding};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, Error)]
pub enum TapeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        stride: (usize, usize),
        padding: Padding,
    },
    BatchNorm {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: ValueId,
        var: ValueId,
        eps: f64,
    },
    Relu {
        input: ValueId,
    },
    MaxPool {
        input: ValueId,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: ValueId,
        window: (usize, usize),
        stride: (usize, usize),
    },
    FullyConnected {
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    Concat {
        parts: Vec<ValueId>,
    },
    Reshape {
        input: ValueId,
    },
    InnerConst {
        input: ValueId,
        with: Tensor<T>,
    },
    Abs {
        input: ValueId,
    },
    Neg {
        input: ValueId,
    },
    Scale {
        input: ValueId,
        factor: T,
    },
    SumAll {
        input: ValueId,
    },
    SumScalars {
        parts: Vec<ValueId>,
    },
    SoftmaxCrossEntropy {
        logits: ValueId,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

struct Entry<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by value id.
pub struct Gradients<T: Scalar> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.by_id.get(&id.0)
    }
}

pub struct Tape<T: Scalar> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> ValueId {
        self.entries.push(Entry {
            value,
            op,
            requires_grad,
        });
        ValueId(self.entries.len() - 1)
    }

    fn needs_grad(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.entries[id.0].requires_grad)
    }

    /// Records an input value. Gradients are produced only for leaves with
    /// `requires_grad` (and flow through everything derived from them).
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> ValueId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> ValueId {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<ValueId, TensorError> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut ids = vec![input, kernel];
        ids.extend(bias);
        let rg = self.needs_grad(&ids);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn batchnorm_inference(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: ValueId,
        var: ValueId,
        eps: f64,
    ) -> Result<ValueId, TensorError> {
        let out = ops::batchnorm_inference(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            self.value(mean),
            self.value(var),
            eps,
        )?;
        let rg = self.needs_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                var,
                eps,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let out = ops::relu(self.value(input));
        let rg = self.needs_grad(&[input]);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn maxpool2d(
        &mut self,
        input: ValueId,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<ValueId, TensorError> {
        let (out, argmax) = ops::maxpool2d(self.value(input), window, stride)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn avgpool2d(
        &mut self,
        input: ValueId,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<ValueId, TensorError> {
        let out = ops::avgpool2d(self.value(input), window, stride)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(
            out,
            Op::AvgPool {
                input,
                window,
                stride,
            },
            rg,
        ))
    }

    pub fn fully_connected(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
    ) -> Result<ValueId, TensorError> {
        let out = ops::fully_connected(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let mut ids = vec![input, weight];
        ids.extend(bias);
        let rg = self.needs_grad(&ids);
        Ok(self.push(
            out,
            Op::FullyConnected {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn residual_add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.add(a, b)
    }

    pub fn concat_channels(&mut self, parts: &[ValueId]) -> Result<ValueId, TensorError> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&tensors)?;
        let rg = self.needs_grad(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: ValueId, shape: &[usize]) -> Result<ValueId, TensorError> {
        let out = self.value(input).reshape(shape)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    /// Flattens `[N, ...]` to `[N, prod(rest)]`.
    pub fn flatten(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let shape = self.value(input).shape().to_vec();
        if shape.is_empty() {
            return Err(TensorError::InvalidDimension(
                "cannot flatten a scalar".into(),
            ));
        }
        let rest: usize = shape[1..].iter().product();
        self.reshape(input, &[shape[0], rest])
    }

    /// Inner product with a constant tensor, over flattened elements.
    pub fn inner_const(&mut self, input: ValueId, with: Tensor<T>) -> Result<ValueId, TensorError> {
        let v = self.value(input).dot(&with)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Tensor::scalar(v), Op::InnerConst { input, with }, rg))
    }

    /// Elementwise absolute value; subgradient at 0 is +1.
    pub fn abs(&mut self, input: ValueId) -> ValueId {
        let out = self.value(input).map(|v| v.abs());
        let rg = self.needs_grad(&[input]);
        self.push(out, Op::Abs { input }, rg)
    }

    pub fn neg(&mut self, input: ValueId) -> ValueId {
        let out = self.value(input).map(|v| -v);
        let rg = self.needs_grad(&[input]);
        self.push(out, Op::Neg { input }, rg)
    }

    /// Multiplication by a constant factor.
    pub fn scale(&mut self, input: ValueId, factor: T) -> ValueId {
        let out = self.value(input).scale(factor);
        let rg = self.needs_grad(&[input]);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum_all(&mut self, input: ValueId) -> ValueId {
        let v = self.value(input).data().iter().copied().sum();
        let rg = self.needs_grad(&[input]);
        self.push(Tensor::scalar(v), Op::SumAll { input }, rg)
    }

    /// Sum of scalar values.
    pub fn sum_scalars(&mut self, parts: &[ValueId]) -> Result<ValueId, TensorError> {
        let mut acc = T::ZERO;
        for &p in parts {
            acc += self.value(p).scalar_value()?;
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::SumScalars {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &[usize],
    ) -> Result<ValueId, TensorError> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every value
    /// that (transitively) requires one; other values are skipped.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<T>, TapeError> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(TapeError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::ONE));

        let accumulate = |slot: &mut Option<Tensor<T>>, delta: Tensor<T>| {
            *slot = Some(match slot.take() {
                Some(existing) => existing.add(&delta).expect("gradient shapes agree"),
                None => delta,
            });
        };

        for id in (0..=loss.0).rev() {
            let entry = &self.entries[id];
            if !entry.requires_grad {
                continue;
            }
            let Some(grad_out) = grads[id].clone() else {
                continue;
            };
            match &entry.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    if self.entries[input.0].requires_grad {
                        let gi = ops::conv2d_backward_input(
                            &grad_out,
                            self.value(*kernel),
                            self.value(*input).shape(),
                            *stride,
                            *padding,
                        )?;
                        accumulate(&mut grads[input.0], gi);
                    }
                    if self.entries[kernel.0].requires_grad {
                        let gk = ops::conv2d_backward_kernel(
                            &grad_out,
                            self.value(*input),
                            self.value(*kernel).shape(),
                            *stride,
                            *padding,
                        )?;
                        accumulate(&mut grads[kernel.0], gk);
                    }
                    if let Some(b) = bias {
                        if self.entries[b.0].requires_grad {
                            accumulate(&mut grads[b.0], ops::conv2d_backward_bias(&grad_out));
                        }
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    let (gi, gg, gb) = ops::batchnorm_inference_backward(
                        &grad_out,
                        self.value(*input),
                        self.value(*gamma),
                        self.value(*mean),
                        self.value(*var),
                        *eps,
                    );
                    if self.entries[input.0].requires_grad {
                        accumulate(&mut grads[input.0], gi);
                    }
                    if self.entries[gamma.0].requires_grad {
                        accumulate(&mut grads[gamma.0], gg);
                    }
                    if self.entries[beta.0].requires_grad {
                        accumulate(&mut grads[beta.0], gb);
                    }
                }
                Op::Relu { input } => {
                    if self.entries[input.0].requires_grad {
                        let gi = ops::relu_backward(self.value(*input), &grad_out);
                        accumulate(&mut grads[input.0], gi);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    if self.entries[input.0].requires_grad {
                        let gi = ops::maxpool2d_backward(
                            &grad_out,
                            argmax,
                            self.value(*input).shape(),
                        );
                        accumulate(&mut grads[input.0], gi);
                    }
                }
                Op::AvgPool {
                    input,
                    window,
                    stride,
                } => {
                    if self.entries[input.0].requires_grad {
                        let gi = ops::avgpool2d_backward(
                            &grad_out,
                            self.value(*input).shape(),
                            *window,
                            *stride,
                        );
                        accumulate(&mut grads[input.0], gi);
                    }
                }
                Op::FullyConnected {
                    input,
                    weight,
                    bias,
                } => {
                    let (gi, gw, gb) = ops::fully_connected_backward(
                        &grad_out,
                        self.value(*input),
                        self.value(*weight),
                    );
                    if self.entries[input.0].requires_grad {
                        accumulate(&mut grads[input.0], gi);
                    }
                    if self.entries[weight.0].requires_grad {
                        accumulate(&mut grads[weight.0], gw);
                    }
                    if let Some(b) = bias {
                        if self.entries[b.0].requires_grad {
                            accumulate(&mut grads[b.0], gb);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for side in [a, b] {
                        if self.entries[side.0].requires_grad {
                            accumulate(&mut grads[side.0], grad_out.clone());
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if self.entries[a.0].requires_grad {
                        accumulate(&mut grads[a.0], grad_out.clone());
                    }
                    if self.entries[b.0].requires_grad {
                        accumulate(&mut grads[b.0], grad_out.map(|v| -v));
                    }
                }
                Op::Concat { parts } => {
                    let shapes: Vec<Vec<usize>> = parts
                        .iter()
                        .map(|&p| self.value(p).shape().to_vec())
                        .collect();
                    let split = ops::concat_channels_backward(&shapes, &grad_out);
                    for (part, grad) in parts.iter().zip(split) {
                        if self.entries[part.0].requires_grad {
                            accumulate(&mut grads[part.0], grad);
                        }
                    }
                }
                Op::Reshape { input } => {
                    if self.entries[input.0].requires_grad {
                        let gi = grad_out.reshape(self.value(*input).shape())?;
                        accumulate(&mut grads[input.0], gi);
                    }
                }
                Op::InnerConst { input, with } => {
                    if self.entries[input.0].requires_grad {
                        let g = grad_out.scalar_value()?;
                        let gi = with.scale(g).reshape(self.value(*input).shape())?;
                        accumulate(&mut grads[input.0], gi);
                    }
                }
                Op::Abs { input } => {
                    if self.entries[input.0].requires_grad {
                        let gi = self
                            .value(*input)
                            .zip_map(&grad_out, |x, g| if x >= T::ZERO { g } else { -g })?;
                        accumulate(&mut grads[input.0], gi);
                    }
                }
                Op::Neg { input } => {
                    if self.entries[input.0].requires_grad {
                        accumulate(&mut grads[input.0], grad_out.map(|v| -v));
                    }
                }
                Op::Scale { input, factor } => {
                    if self.entries[input.0].requires_grad {
                        accumulate(&mut grads[input.0], grad_out.scale(*factor));
                    }
                }
                Op::SumAll { input } => {
                    if self.entries[input.0].requires_grad {
                        let g = grad_out.scalar_value()?;
                        let gi = Tensor::full(self.value(*input).shape(), g);
                        accumulate(&mut grads[input.0], gi);
                    }
                }
                Op::SumScalars { parts } => {
                    for part in parts {
                        if self.entries[part.0].requires_grad {
                            let gi = grad_out.reshape(self.value(*part).shape())?;
                            accumulate(&mut grads[part.0], gi);
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    if self.entries[logits.0].requires_grad {
                        let g = grad_out.scalar_value()?;
                        let gi = ops::softmax_cross_entropy_backward(probs, labels, g);
                        accumulate(&mut grads[logits.0], gi);
                    }
                }
            }
        }

        let by_id = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| g.map(|g| (id, g)))
            .collect();
        Ok(Gradients { by_id })
    }
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over reliable coordinates of
    /// `|analytic - central| / (|analytic| + |central| + tiny)`.
    pub max_rel_error: f64,
    /// Coordinates where the two-step central differences disagree, meaning
    /// a kink (ReLU corner, pooling switch, |.|) lies inside the step window.
    pub unreliable: Vec<usize>,
    pub checked: usize,
}

/// Checks the tape gradient of `program` against central finite differences
/// at `point`. Coordinates whose difference quotient is inconsistent between
/// step sizes `step` and `step/2` are excluded as unreliable.
pub fn grad_check<F>(program: F, point: &Tensor<f64>, step: f64) -> Result<GradCheckReport, TapeError>
where
    F: Fn(&mut Tape<f64>, ValueId) -> Result<ValueId, TensorError>,
{
    assert!(step > 0.0, "grad_check step must be positive");
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let loss = program(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: &Tensor<f64>| -> Result<f64, TapeError> {
        let mut t = Tape::new();
        let leaf = t.constant(p.clone());
        let out = program(&mut t, leaf)?;
        Ok(t.value(out).scalar_value()?)
    };

    let eval_at = |i: usize, offset: f64| -> Result<f64, TapeError> {
        let mut shifted = point.clone();
        shifted.data_mut()[i] += offset;
        eval(&shifted)
    };

    const TINY: f64 = 1e-12;
    let f0 = eval(point)?;
    let mut max_rel = 0.0f64;
    let mut unreliable = Vec::new();
    for i in 0..point.numel() {
        let f_plus = eval_at(i, step)?;
        let f_minus = eval_at(i, -step)?;
        let central_full = (f_plus - f_minus) / (2.0 * step);
        let central_half = (eval_at(i, step / 2.0)? - eval_at(i, -step / 2.0)?) / step;
        let forward = (f_plus - f0) / step;
        let backward = (f0 - f_minus) / step;
        // A kink inside the window makes either the two-scale central
        // differences or the one-sided differences disagree.
        let two_scale_bad =
            (central_full - central_half).abs() > 1e-3 * (central_full.abs() + central_half.abs() + TINY);
        let one_sided_bad =
            (forward - backward).abs() > 1e-3 * (forward.abs() + backward.abs() + TINY);
        if two_scale_bad || one_sided_bad {
            unreliable.push(i);
            continue;
        }
        let a = analytic.data()[i];
        let rel = (a - central_full).abs() / (a.abs() + central_full.abs() + TINY);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        unreliable,
        checked: point.numel(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{gaussian_tensor, rng_from_seed};

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap(), true);
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn linear_functional_gradient_is_wt_v() {
        // loss = <W x, v> -> dloss/dx = W^T v
        let mut rng = rng_from_seed(17);
        let w = gaussian_tensor::<f64>(&[4, 3], &mut rng);
        let v = gaussian_tensor::<f64>(&[1, 4], &mut rng);
        let x0 = gaussian_tensor::<f64>(&[1, 3], &mut rng);

        let mut tape = Tape::new();
        let x = tape.leaf(x0, true);
        let w_id = tape.constant(w.clone());
        let y = tape.fully_connected(x, w_id, None).unwrap();
        let loss = tape.inner_const(y, v.clone()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let got = grads.get(x).unwrap();
        for i in 0..3 {
            let want: f64 = (0..4).map(|j| w.data()[j * 3 + i] * v.data()[j]).sum();
            assert!((got.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TapeError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn unrequested_leaves_are_skipped() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0f64), true);
        let y = tape.leaf(Tensor::full(&[2], 2.0f64), false);
        let s = tape.add(x, y).unwrap();
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_some());
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn abs_subgradient_at_zero_is_plus_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0f64), true);
        let a = tape.abs(x);
        let grads = tape.backward(a).unwrap();
        assert_eq!(grads.get(x).unwrap().scalar_value().unwrap(), 1.0);
    }

    #[test]
    fn fanout_accumulates() {
        // loss = sum(x + x) -> grad = 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 1.0f64), true);
        let s = tape.add(x, x).unwrap();
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::full(&[3], 2.0));
    }

    /// A conv -> relu -> fc composition with a scalar readout; used by the
    /// finite-difference checks below.
    fn small_net_program(
        rng_seed: u64,
    ) -> impl Fn(&mut Tape<f64>, ValueId) -> Result<ValueId, TensorError> {
        move |tape: &mut Tape<f64>, x: ValueId| {
            let mut rng = rng_from_seed(rng_seed);
            let k1 = gaussian_tensor::<f64>(&[3, 1, 3, 3], &mut rng);
            let b1 = gaussian_tensor::<f64>(&[3], &mut rng);
            let k2 = gaussian_tensor::<f64>(&[2, 3, 3, 3], &mut rng);
            let w = gaussian_tensor::<f64>(&[2, 2 * 6 * 6], &mut rng);
            let v = gaussian_tensor::<f64>(&[1, 2], &mut rng);
            let k1 = tape.constant(k1);
            let b1 = tape.constant(b1);
            let k2 = tape.constant(k2);
            let w = tape.constant(w);
            let c1 = tape.conv2d(x, k1, Some(b1), (1, 1), Padding::Zero(1, 1))?;
            let r1 = tape.relu(c1);
            let c2 = tape.conv2d(r1, k2, None, (1, 1), Padding::Zero(1, 1))?;
            let r2 = tape.relu(c2);
            let flat = tape.flatten(r2)?;
            let logits = tape.fully_connected(flat, w, None)?;
            tape.inner_const(logits, v)
        }
    }

    #[test]
    fn conv_net_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(23);
        let point = gaussian_tensor::<f64>(&[1, 1, 6, 6], &mut rng);
        let report = grad_check(small_net_program(99), &point, 1e-5).unwrap();
        assert!(
            report.max_rel_error <= 1e-6,
            "relative error {} too large",
            report.max_rel_error
        );
        // Random gaussian inputs essentially never sit on a kink.
        assert!(report.unreliable.len() < report.checked / 4);
    }

    #[test]
    fn grad_check_flags_kink_coordinates() {
        // f(x) = sum(relu(x)) with one coordinate exactly at the kink and the
        // step straddling it.
        let program = |tape: &mut Tape<f64>, x: ValueId| -> Result<ValueId, TensorError> {
            let r = tape.relu(x);
            Ok(tape.sum_all(r))
        };
        let point = Tensor::new(vec![1, 1, 1, 3], vec![1.0f64, 0.0, -1.0]).unwrap();
        let report = grad_check(program, &point, 1e-3).unwrap();
        assert_eq!(report.unreliable, vec![1]);
        assert!(report.max_rel_error <= 1e-9); // the linear coords are exact
    }

    #[test]
    fn linear_program_error_below_1e9() {
        let program = |tape: &mut Tape<f64>, x: ValueId| -> Result<ValueId, TensorError> {
            Ok(tape.sum_all(x))
        };
        let point = Tensor::new(vec![4], vec![0.3f64, -0.7, 1.1, 0.0]).unwrap();
        let report = grad_check(program, &point, 1e-4).unwrap();
        assert!(report.max_rel_error <= 1e-9);
        assert!(report.unreliable.is_empty());
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut rng = rng_from_seed(4);
            let point = gaussian_tensor::<f64>(&[1, 1, 6, 6], &mut rng);
            let mut tape = Tape::new();
            let x = tape.leaf(point, true);
            let loss = small_net_program(5)(&mut tape, x).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).scalar_value().unwrap(),
                grads.get(x).unwrap().clone(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
