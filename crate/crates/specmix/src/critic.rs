//! Wasserstein critic: a strided 1-D convolution stack that scores each
//! spectrum with a scalar, trained with a gradient-norm penalty on convex
//! combinations of real and reconstructed spectra.
//!
//! Layer stack (output length for input D):
//!   conv(5ch,  k21, s5), BN, PReLU -> D/5  x 5
//!   conv(10ch, k5,  s2), BN, PReLU -> D/10 x 10
//!   conv(20ch, k5,  s2), BN, PReLU -> D/20 x 20
//!   conv(5ch,  k1,  s1)            -> D/20 x 5
//!   mean over positions and channels -> scalar per sample

use rand::Rng;

use crate::autodiff::nn::{self, BnState, Mode};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::params::{he_init, ParamGroup};

pub const DEFAULT_GP_WEIGHT: f64 = 10.0;
const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct CriticParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub bn1_gamma: Tensor,
    pub bn1_beta: Tensor,
    pub a1: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub bn2_gamma: Tensor,
    pub bn2_beta: Tensor,
    pub a2: Tensor,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    pub bn3_gamma: Tensor,
    pub bn3_beta: Tensor,
    pub a3: Tensor,
    pub conv4_w: Tensor,
    pub conv4_b: Tensor,
    pub bn1_state: BnState,
    pub bn2_state: BnState,
    pub bn3_state: BnState,
    pub input_bands: usize,
}

impl CriticParams {
    pub fn init<R: Rng>(rng: &mut R, input_bands: usize) -> Result<Self> {
        if input_bands < 21 {
            return Err(Error::Config(format!(
                "critic needs at least 21 spectral bands, got {}",
                input_bands
            )));
        }
        Ok(CriticParams {
            conv1_w: he_init(rng, &[21, 1, 5], 21),
            conv1_b: Tensor::zeros(&[5]),
            bn1_gamma: Tensor::full(&[5], 1.0),
            bn1_beta: Tensor::zeros(&[5]),
            a1: Tensor::full(&[5], PRELU_INIT),
            conv2_w: he_init(rng, &[5, 5, 10], 5 * 5),
            conv2_b: Tensor::zeros(&[10]),
            bn2_gamma: Tensor::full(&[10], 1.0),
            bn2_beta: Tensor::zeros(&[10]),
            a2: Tensor::full(&[10], PRELU_INIT),
            conv3_w: he_init(rng, &[5, 10, 20], 5 * 10),
            conv3_b: Tensor::zeros(&[20]),
            bn3_gamma: Tensor::full(&[20], 1.0),
            bn3_beta: Tensor::zeros(&[20]),
            a3: Tensor::full(&[20], PRELU_INIT),
            conv4_w: he_init(rng, &[1, 20, 5], 20),
            conv4_b: Tensor::zeros(&[5]),
            bn1_state: BnState::new(5),
            bn2_state: BnState::new(10),
            bn3_state: BnState::new(20),
            input_bands,
        })
    }
}

impl ParamGroup for CriticParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1_w, &self.conv1_b, &self.bn1_gamma, &self.bn1_beta, &self.a1,
            &self.conv2_w, &self.conv2_b, &self.bn2_gamma, &self.bn2_beta, &self.a2,
            &self.conv3_w, &self.conv3_b, &self.bn3_gamma, &self.bn3_beta, &self.a3,
            &self.conv4_w, &self.conv4_b,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1_w, &mut self.conv1_b, &mut self.bn1_gamma, &mut self.bn1_beta, &mut self.a1,
            &mut self.conv2_w, &mut self.conv2_b, &mut self.bn2_gamma, &mut self.bn2_beta, &mut self.a2,
            &mut self.conv3_w, &mut self.conv3_b, &mut self.bn3_gamma, &mut self.bn3_beta, &mut self.a3,
            &mut self.conv4_w, &mut self.conv4_b,
        ]
    }
}

pub struct CriticBound {
    pub ids: Vec<NodeId>,
}

impl CriticBound {
    fn id(&self, i: usize) -> NodeId {
        self.ids[i]
    }
}

pub fn bind(params: &CriticParams, tape: &mut Tape) -> Result<CriticBound> {
    Ok(CriticBound { ids: params.bind(tape)? })
}

/// Layer-shape trail of one critic forward.
pub struct CriticTrace {
    pub layer_shapes: Vec<(&'static str, Vec<usize>)>,
}

fn conv_bn_prelu(
    tape: &mut Tape,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    gamma: NodeId,
    beta: NodeId,
    slope: NodeId,
    state: &mut BnState,
    stride: usize,
    mode: Mode,
) -> Result<NodeId> {
    let c = nn::conv1d_bias(tape, x, w, b, stride)?;
    let n = nn::batch_norm(tape, c, gamma, beta, state, mode)?;
    nn::prelu(tape, n, slope)
}

/// Score a batch of spectra [B, D]; returns per-sample scalars [B].
pub fn discriminate(
    params: &mut CriticParams,
    bound: &CriticBound,
    tape: &mut Tape,
    batch: NodeId,
    mode: Mode,
) -> Result<(NodeId, CriticTrace)> {
    let shape = tape.value(batch).shape().to_vec();
    if shape.len() != 2 || shape[1] != params.input_bands {
        return Err(Error::Shape(format!(
            "critic expects [B, {}], got {:?}",
            params.input_bands, shape
        )));
    }
    let (b, d) = (shape[0], shape[1]);
    let mut trace = CriticTrace { layer_shapes: Vec::new() };
    let log = |tape: &Tape, name: &'static str, id: NodeId| (name, tape.value(id).shape().to_vec());

    let x = tape.reshape(batch, vec![b, d, 1])?;
    let h1 = conv_bn_prelu(
        tape, x, bound.id(0), bound.id(1), bound.id(2), bound.id(3), bound.id(4),
        &mut params.bn1_state, 5, mode,
    )?;
    trace.layer_shapes.push(log(tape, "block1", h1));
    let h2 = conv_bn_prelu(
        tape, h1, bound.id(5), bound.id(6), bound.id(7), bound.id(8), bound.id(9),
        &mut params.bn2_state, 2, mode,
    )?;
    trace.layer_shapes.push(log(tape, "block2", h2));
    let h3 = conv_bn_prelu(
        tape, h2, bound.id(10), bound.id(11), bound.id(12), bound.id(13), bound.id(14),
        &mut params.bn3_state, 2, mode,
    )?;
    trace.layer_shapes.push(log(tape, "block3", h3));
    let h4 = nn::conv1d_bias(tape, h3, bound.id(15), bound.id(16), 1)?;
    trace.layer_shapes.push(log(tape, "head", h4));
    let m = tape.mean_axes(h4, &[1, 2])?;
    let out = tape.reshape(m, vec![b])?;
    Ok((out, trace))
}

/// Per-sample convex combination u*real + (1-u)*fake; `u` is [B, 1] in [0,1].
pub fn interpolate(tape: &mut Tape, real: NodeId, fake: NodeId, u: Tensor) -> Result<NodeId> {
    if u.rank() != 2 || u.shape()[1] != 1 {
        return Err(Error::Shape(format!("interpolation weights must be [B,1], got {:?}", u.shape())));
    }
    if u.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Param("interpolation weights must lie in [0,1]".into()));
    }
    let one_minus: Vec<f64> = u.data().iter().map(|&v| 1.0 - v).collect();
    let un = tape.constant(u.clone())?;
    let vn = tape.constant(Tensor::new(u.shape().to_vec(), one_minus)?)?;
    let a = tape.mul(un, real)?;
    let b = tape.mul(vn, fake)?;
    tape.add(a, b)
}

/// Components of the critic objective for one batch.
pub struct AdversarialParts {
    /// mean critic score on real spectra
    pub real_score: NodeId,
    /// mean critic score on reconstructed spectra
    pub fake_score: NodeId,
    /// mean (||grad||-1)^2 at the interpolates
    pub penalty: NodeId,
    /// real_score - fake_score - gp_weight * penalty (the critic maximizes this)
    pub objective: NodeId,
}

/// Critic objective on a batch: score gap minus the weighted gradient-norm
/// penalty at per-sample interpolates.
pub fn adversarial_loss(
    params: &mut CriticParams,
    bound: &CriticBound,
    tape: &mut Tape,
    real: NodeId,
    fake: NodeId,
    u: Tensor,
    gp_weight: f64,
    mode: Mode,
) -> Result<AdversarialParts> {
    let (d_real, _) = discriminate(params, bound, tape, real, mode)?;
    let (d_fake, _) = discriminate(params, bound, tape, fake, mode)?;
    let real_score = tape.mean_all(d_real)?;
    let fake_score = tape.mean_all(d_fake)?;
    let x_tilde = interpolate(tape, real, fake, u)?;
    let (d_tilde, _) = discriminate(params, bound, tape, x_tilde, mode)?;
    let d_sum = tape.sum_all(d_tilde)?;
    let penalty = nn::gradient_norm_penalty(tape, d_sum, x_tilde)?;
    let gap = tape.sub(real_score, fake_score)?;
    let scaled = tape.scale(penalty, gp_weight)?;
    let objective = tape.sub(gap, scaled)?;
    Ok(AdversarialParts { real_score, fake_score, penalty, objective })
}
