//! Differentiable layers: 2-D convolution, batch normalization, pooling,
//! fully connected, and softmax cross-entropy — enough to assemble a
//! bottleneck ResNet.

pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, conv2d_params, Conv2dParams};
pub use linear::{linear, linear_params, LinearParams};
pub use loss::softmax_cross_entropy;
pub use norm::{batchnorm, batchnorm_params, BatchNormParams, BatchNormState};
pub use pool::{global_avg_pool, maxpool2};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forward-pass mode. Training normalizes with batch statistics and updates
/// running stats; inference uses the stored running stats and mutates
/// nothing.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Named flat storage for a model's parameters and buffers.
///
/// Trainable entries receive gradients and optimizer updates; non-trainable
/// entries (batch-norm running stats) ride along for checkpointing only.
/// Entry order is insertion order everywhere, which keeps byte layouts and
/// update order deterministic.
#[derive(Clone)]
pub struct ParamStore<E: Elem> {
    entries: Vec<ParamEntry<E>>,
}

#[derive(Clone)]
struct ParamEntry<E: Elem> {
    name: String,
    tensor: Tensor<E>,
    trainable: bool,
}

/// Handle into a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<E>, trainable: bool) -> ParamId {
        tensor.set_requires_grad(trainable);
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total scalar count across trainable entries; running stats and other
    /// buffers are excluded.
    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.tensor, e.trainable))
    }
}

/// Kaiming-uniform fan-in initialization: `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`, the standard choice for ReLU networks.
pub fn kaiming_uniform<E: Elem>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<E>> {
    if fan_in == 0 {
        return Err(Error::op("init", "fan_in must be positive"));
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<E> = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, values, false)
}
