//! Neural-network composites built from tape primitives.
//!
//! Everything here lowers to primitive ops, so gradients (and second-order
//! gradients) come from the tape's own backward mechanism.

use std::str::FromStr;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const SN_EPS: f64 = 1e-8;
pub const L1_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LRelu,
    PRelu,
    Sigmoid,
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lrelu" => Ok(Activation::LRelu),
            "prelu" => Ok(Activation::PRelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Param(format!("unknown activation kind `{}`", other))),
        }
    }
}

pub const LRELU_SLOPE: f64 = 0.01;

/// Elementwise activation. `slope_param` is required for prelu (per-channel,
/// broadcast over trailing axes) and ignored otherwise.
pub fn activation(
    tape: &mut Tape,
    kind: Activation,
    x: NodeId,
    slope_param: Option<NodeId>,
) -> Result<NodeId> {
    match kind {
        Activation::LRelu => tape.lrelu(x, LRELU_SLOPE),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
        Activation::PRelu => match slope_param {
            Some(a) => prelu(tape, x, a),
            None => Err(Error::Param("prelu needs a slope parameter".into())),
        },
    }
}

/// max(x,0) + a*min(x,0) with trainable per-channel slope `a`.
pub fn prelu(tape: &mut Tape, x: NodeId, a: NodeId) -> Result<NodeId> {
    let pos = tape.relu(x)?;
    let nx = tape.neg(x)?;
    let rnx = tape.relu(nx)?;
    let minx = tape.neg(rnx)?; // min(x, 0)
    let negterm = tape.mul(minx, a)?;
    tape.add(pos, negterm)
}

/// Affine map x[B,F] * w[F,O] + b[O].
pub fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// conv1d with per-output-channel bias.
pub fn conv1d_bias(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
    let y = tape.conv1d(x, w, stride)?;
    tape.add(y, b)
}

/// Softmax along `axis`, stabilized by max subtraction (the max is a
/// constant shift, so values and gradients are unaffected).
pub fn softmax(tape: &mut Tape, x: NodeId, axis: usize) -> Result<NodeId> {
    let v = tape.value(x);
    if axis >= v.rank() {
        return Err(Error::Shape(format!("softmax axis {} out of range for {:?}", axis, v.shape())));
    }
    let shape = v.shape().to_vec();
    let (outer, dim, inner) = super::kernels::axis_split(&shape, axis);
    let mut mx_shape = shape.clone();
    mx_shape[axis] = 1;
    let mut mx = vec![f64::NEG_INFINITY; outer * inner];
    let data = v.data();
    for o in 0..outer {
        for d in 0..dim {
            for i in 0..inner {
                let val = data[(o * dim + d) * inner + i];
                let m = &mut mx[o * inner + i];
                if val > *m {
                    *m = val;
                }
            }
        }
    }
    let cmax = tape.constant(Tensor::new(mx_shape, mx)?)?;
    let shifted = tape.sub(x, cmax)?;
    let e = tape.exp(shifted)?;
    let s = tape.reduce_sum(e, &[axis])?;
    tape.div(e, s)
}

/// Divide by the slice sum along `axis` (entries must be nonnegative).
/// Returns the node and the number of all-zero slices that were ε-guarded.
pub fn l1_normalize(tape: &mut Tape, x: NodeId, axis: usize) -> Result<(NodeId, usize)> {
    let v = tape.value(x);
    if v.data().iter().any(|&e| e < 0.0) {
        return Err(Error::Contract("l1_normalize input must be nonnegative".into()));
    }
    let s = tape.reduce_sum(x, &[axis])?;
    let zero_slices = tape.value(s).data().iter().filter(|&&e| e == 0.0).count();
    let sg = tape.add_const(s, L1_EPS)?;
    let y = tape.div(x, sg)?;
    Ok((y, zero_slices))
}

/// Divide by the absolute-value sum along `axis`; unlike `l1_normalize`
/// this accepts signed inputs (the entries keep their signs).
pub fn l1_scale(tape: &mut Tape, x: NodeId, axis: usize) -> Result<NodeId> {
    let a = tape.abs(x)?;
    let s = tape.reduce_sum(a, &[axis])?;
    let sg = tape.add_const(s, L1_EPS)?;
    tape.div(x, sg)
}

/// Running batch-norm statistics for one [B,T,C] layer.
#[derive(Debug, Clone)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

/// Batch normalization over batch and position, per channel.
///
/// Train mode uses batch statistics and updates the running averages;
/// infer mode normalizes with the stored running averages.
pub fn batch_norm(
    tape: &mut Tape,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    state: &mut BnState,
    mode: Mode,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("batch_norm expects [B,T,C], got {:?}", shape)));
    }
    let c = shape[2];
    if c != state.running_mean.len() {
        return Err(Error::Shape("batch_norm channel count mismatch with state".into()));
    }
    let xhat = match mode {
        Mode::Train => {
            if shape[0] < 2 {
                return Err(Error::Batch("batch_norm train mode needs batch size >= 2".into()));
            }
            let m = tape.mean_axes(x, &[0, 1])?;
            let xc = tape.sub(x, m)?;
            let sq = tape.square(xc)?;
            let var = tape.mean_axes(sq, &[0, 1])?;
            let mom = state.momentum;
            for i in 0..c {
                state.running_mean[i] = mom * state.running_mean[i] + (1.0 - mom) * tape.value(m).data()[i];
                state.running_var[i] = mom * state.running_var[i] + (1.0 - mom) * tape.value(var).data()[i];
            }
            let ve = tape.add_const(var, state.eps)?;
            let sd = tape.sqrt(ve)?;
            tape.div(xc, sd)?
        }
        Mode::Infer => {
            let m = tape.constant(Tensor::new(vec![1, 1, c], state.running_mean.clone())?)?;
            let sd_vals: Vec<f64> = state.running_var.iter().map(|&v| (v + state.eps).sqrt()).collect();
            let sd = tape.constant(Tensor::new(vec![1, 1, c], sd_vals)?)?;
            let xc = tape.sub(x, m)?;
            tape.div(xc, sd)?
        }
    };
    let scaled = tape.mul(xhat, gamma)?;
    tape.add(scaled, beta)
}

/// Normalize along the spectral axis only, per sample and channel.
pub fn spectral_norm(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("spectral_norm expects [B,T,C], got {:?}", shape)));
    }
    if shape[1] < 2 {
        return Err(Error::Shape("spectral_norm needs spectral length >= 2".into()));
    }
    let m = tape.mean_axes(x, &[1])?;
    let xc = tape.sub(x, m)?;
    let sq = tape.square(xc)?;
    let var = tape.mean_axes(sq, &[1])?;
    let ve = tape.add_const(var, SN_EPS)?;
    let sd = tape.sqrt(ve)?;
    tape.div(xc, sd)
}

/// Mean over samples of (||∇_x f||₂ − 1)², built on-tape so it can be
/// differentiated again with respect to the parameters inside `f`.
///
/// `scalar_sum` must be the sum of per-sample outputs; `x` is [B,D].
pub fn gradient_norm_penalty(tape: &mut Tape, scalar_sum: NodeId, x: NodeId) -> Result<NodeId> {
    let grads = tape.backward_nodes(scalar_sum, &[x])?;
    let g = grads[0];
    let g2 = tape.square(g)?;
    let s = tape.reduce_sum(g2, &[1])?;
    let se = tape.add_const(s, 1e-12)?;
    let n = tape.sqrt(se)?;
    let d = tape.add_const(n, -1.0)?;
    let p = tape.square(d)?;
    tape.mean_all(p)
}
