//! Minimal differentiable substrate for 2D convolutional networks.
//!
//! Every layer exposes an explicit `forward` and `backward`; callers keep
//! whatever activations the backward pass needs. There is no tape, so a
//! forward pass without a retained cache records no gradient state at all.

mod layers;
mod optim;
mod tensor;

pub use layers::{concat_channels, maxpool2, maxpool2_backward, relu_inplace, relu_backward, split_channels,
    upsample2, upsample2_backward, Conv2d, PoolIndices};
pub use optim::{clip_global_norm, Adam, AdamState};
pub use tensor::{Real, Tensor};

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}
