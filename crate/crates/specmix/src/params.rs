//! Shared parameter-group plumbing: ordered tensor access for the optimizer
//! and checkpointing, plus weight initialization helpers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::Result;

/// A named set of trainable tensors with a stable ordering.
pub trait ParamGroup {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// Insert every tensor as a trainable leaf, preserving order.
    fn bind(&self, tape: &mut Tape) -> Result<Vec<NodeId>> {
        self.tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect()
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Zero-mean Gaussian init with std sqrt(2/fan_in), for layers feeding LReLU.
pub fn he_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    gaussian_init(rng, shape, (2.0 / fan_in as f64).sqrt())
}

pub fn gaussian_init<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}
