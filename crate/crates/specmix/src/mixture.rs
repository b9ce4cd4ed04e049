//! Multinomial mixture abundance kernel.
//!
//! Each of the K materials is represented by N components. A component's
//! response to a latent feature z is sigmoid(-(w1·z + b1)) and its weight is
//! a softmax over the component axis of w2·z + b2; abundances are the
//! weighted component sums, l1-normalized over materials.

use rand::Rng;

use crate::autodiff::nn;
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::params::{gaussian_init, ParamGroup};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MixtureConfig {
    /// Number of materials (K).
    pub materials: usize,
    /// Components per material (N). Must satisfy N >= K.
    pub components: usize,
    /// Latent feature dimension (M).
    pub latent_dim: usize,
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.materials < 2 {
            return Err(Error::Param("mixture kernel needs at least 2 materials".into()));
        }
        if self.components < self.materials {
            return Err(Error::Param(format!(
                "component count N={} must be >= material count K={}",
                self.components, self.materials
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MixtureParams {
    /// Distance-surrogate weights, [K*N, M].
    pub w1: Tensor,
    /// Distance-surrogate biases, [K*N].
    pub b1: Tensor,
    /// Mixture-weight weights, [K*N, M].
    pub w2: Tensor,
    /// Mixture-weight biases, [K*N].
    pub b2: Tensor,
    pub cfg: MixtureConfig,
}

impl MixtureParams {
    pub fn init<R: Rng>(rng: &mut R, cfg: MixtureConfig) -> Result<Self> {
        cfg.validate()?;
        let kn = cfg.materials * cfg.components;
        let std = (1.0 / cfg.latent_dim as f64).sqrt();
        Ok(MixtureParams {
            w1: gaussian_init(rng, &[kn, cfg.latent_dim], std),
            b1: Tensor::zeros(&[kn]),
            w2: gaussian_init(rng, &[kn, cfg.latent_dim], std),
            b2: Tensor::zeros(&[kn]),
            cfg,
        })
    }
}

impl ParamGroup for MixtureParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

pub struct MixtureBound {
    pub ids: Vec<NodeId>,
}

pub fn bind(params: &MixtureParams, tape: &mut Tape) -> Result<MixtureBound> {
    Ok(MixtureBound { ids: params.bind(tape)? })
}

fn per_component_affine(
    tape: &mut Tape,
    cfg: &MixtureConfig,
    z: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let zshape = tape.value(z).shape().to_vec();
    if zshape.len() != 2 || zshape[1] != cfg.latent_dim {
        return Err(Error::Shape(format!(
            "mixture kernel expects latent [B, {}], got {:?}",
            cfg.latent_dim, zshape
        )));
    }
    let batch = zshape[0];
    let wt = tape.transpose(w)?;
    let prod = tape.matmul(z, wt)?;
    let logits = tape.add(prod, b)?;
    tape.reshape(logits, vec![batch, cfg.materials, cfg.components])
}

/// Component responses sigmoid(-(w1·z + b1)), shaped [B, K, N].
pub fn component_similarity(
    params: &MixtureParams,
    bound: &MixtureBound,
    tape: &mut Tape,
    z: NodeId,
) -> Result<NodeId> {
    let logits = per_component_affine(tape, &params.cfg, z, bound.ids[0], bound.ids[1])?;
    let neg = tape.neg(logits)?;
    tape.sigmoid(neg)
}

/// Component weights softmax_N(w2·z + b2), shaped [B, K, N].
pub fn mixture_weights(
    params: &MixtureParams,
    bound: &MixtureBound,
    tape: &mut Tape,
    z: NodeId,
) -> Result<NodeId> {
    let logits = per_component_affine(tape, &params.cfg, z, bound.ids[2], bound.ids[3])?;
    nn::softmax(tape, logits, 2)
}

/// Simplex-valued abundances [B, K].
pub fn abundances(
    params: &MixtureParams,
    bound: &MixtureBound,
    tape: &mut Tape,
    z: NodeId,
) -> Result<NodeId> {
    let sim = component_similarity(params, bound, tape, z)?;
    let pi = mixture_weights(params, bound, tape, z)?;
    let weighted = tape.mul(pi, sim)?;
    let summed = tape.reduce_sum(weighted, &[2])?;
    let batch = tape.value(z).shape()[0];
    let k = params.cfg.materials;
    let mut flat = tape.reshape(summed, vec![batch, k])?;
    // Rows that underflowed to (near) zero fall back to a uniform abundance.
    // The threshold keeps the epsilon inside the final normalization from
    // visibly distorting the sum-to-one constraint of surviving rows.
    const DEGENERATE_SUM: f64 = 1e-6;
    let v = tape.value(flat);
    let degenerate: Vec<usize> = (0..batch)
        .filter(|&b| v.data()[b * k..(b + 1) * k].iter().sum::<f64>() < DEGENERATE_SUM)
        .collect();
    if !degenerate.is_empty() {
        eprintln!(
            "warning: {} abundance row(s) underflowed to zero; using uniform fallback",
            degenerate.len()
        );
        let mut fb = vec![0.0; batch * k];
        for &b in &degenerate {
            fb[b * k..(b + 1) * k].fill(1.0);
        }
        let fbn = tape.constant(Tensor::new(vec![batch, k], fb)?)?;
        flat = tape.add(flat, fbn)?;
    }
    let (y, _) = nn::l1_normalize(tape, flat, 1)?;
    Ok(y)
}
