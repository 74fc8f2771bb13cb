//! Data-free universal adversarial perturbations via spectral alignment.
//!
//! This crate builds UAPs for networks made of linear layers (convolution,
//! batch normalization, fully connected) interleaved with 1-Lipschitz
//! nonlinearities (ReLU, pooling, residual additions, channel concat).
//! The perturbation is optimized, without any training data, to align the
//! layer-wise propagated input error with the top right singular vector of
//! each linear layer.
//!
//! Module map:
//! - [`tensor`]: dense row-major tensors over `f32`/`f64`
//! - [`ops`]: forward kernels and their exact adjoints/VJPs
//! - [`tape`]: reverse-mode differentiation over the fixed layer vocabulary
//! - [`model`]: layer-graph IR, manifest serialization, forward execution
//! - [`linops`]: matrix-free views of linear layers plus dense materializations
//! - [`spectral`]: power iteration, dense SVD oracle, Lipschitz certificates
//! - [`attack`]: perturbation synthesis (delta propagation + alignment loss)
//! - [`train`] / [`dataset`] / [`eval`]: desk-scale victims and attack metrics
//! - [`io`]: NTSR1 tensor blobs, IDX datasets, PPM dumps

pub mod attack;
pub mod dataset;
pub mod eval;
pub mod io;
pub mod linops;
pub mod optim;
pub mod spectral;
pub mod model;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod util;

pub use tensor::{Dtype, Scalar, Tensor, TensorError};
