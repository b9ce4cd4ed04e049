//! Reconstruction head: fixed endmember mixing plus trainable residual and
//! uncertainty terms, each a small two-layer net with a box-bounded scale.

use rand::Rng;

use crate::autodiff::nn::{self, LRELU_SLOPE};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::params::{he_init, ParamGroup};

pub const ALPHA_U_RANGE: f64 = 0.1;
pub const ALPHA_R_RANGE: f64 = 0.05;
const HIDDEN: usize = 20;

/// Fixed K x D endmember reflectances.
#[derive(Debug, Clone)]
pub struct EndmemberMatrix {
    matrix: Tensor,
}

impl EndmemberMatrix {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::Shape("endmember matrix must be K x D".into()));
        }
        let (k, d) = (matrix.shape()[0], matrix.shape()[1]);
        for row in 0..k {
            let r = &matrix.data()[row * d..(row + 1) * d];
            if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Format(format!("endmember row {} has negative or non-finite entries", row)));
            }
            if r.iter().all(|v| *v == 0.0) {
                return Err(Error::Format(format!("endmember row {} is all zeros", row)));
            }
        }
        Ok(EndmemberMatrix { matrix })
    }

    pub fn materials(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn bands(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.matrix
    }

    /// L1 norm of each endmember row.
    pub fn row_l1(&self) -> Vec<f64> {
        let d = self.bands();
        (0..self.materials())
            .map(|k| self.matrix.data()[k * d..(k + 1) * d].iter().sum())
            .collect()
    }

    /// Row-wise l1-normalized copy (the decoder's mixing basis when training
    /// on l1-normalized spectra).
    pub fn l1_normalized(&self) -> EndmemberMatrix {
        let d = self.bands();
        let norms = self.row_l1();
        let mut data = self.matrix.data().to_vec();
        for k in 0..self.materials() {
            for v in &mut data[k * d..(k + 1) * d] {
                *v /= norms[k];
            }
        }
        EndmemberMatrix { matrix: Tensor::new(vec![self.materials(), d], data).unwrap() }
    }
}

/// Two-layer net in -> 20 -> D with LReLU hidden and TanH output.
#[derive(Debug, Clone)]
struct TwoLayerNet {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl TwoLayerNet {
    fn init<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        TwoLayerNet {
            w1: he_init(rng, &[input, HIDDEN], input),
            b1: Tensor::zeros(&[HIDDEN]),
            w2: he_init(rng, &[HIDDEN, output], HIDDEN),
            b2: Tensor::zeros(&[output]),
        }
    }
}

/// Residual and uncertainty nets plus their box-bounded scales. The scales
/// are stored unconstrained and mapped through range * sigmoid(s).
#[derive(Debug, Clone)]
pub struct DecoderParams {
    res: TwoLayerNet,
    unc: TwoLayerNet,
    pub alpha_r_raw: Tensor,
    pub alpha_u_raw: Tensor,
    pub materials: usize,
    pub noise_dim: usize,
    pub bands: usize,
}

impl DecoderParams {
    pub fn init<R: Rng>(rng: &mut R, materials: usize, noise_dim: usize, bands: usize) -> Self {
        DecoderParams {
            res: TwoLayerNet::init(rng, materials, bands),
            unc: TwoLayerNet::init(rng, materials + noise_dim, bands),
            // sigmoid(0) = 1/2 puts both scales at mid-range
            alpha_r_raw: Tensor::zeros(&[1]),
            alpha_u_raw: Tensor::zeros(&[1]),
            materials,
            noise_dim,
            bands,
        }
    }

    pub fn alpha_r(&self) -> f64 {
        ALPHA_R_RANGE * sigmoid(self.alpha_r_raw.data()[0])
    }

    pub fn alpha_u(&self) -> f64 {
        ALPHA_U_RANGE * sigmoid(self.alpha_u_raw.data()[0])
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Residual-net parameter group (theta_r plus alpha_r).
pub struct ResidualGroup<'a>(pub &'a DecoderParams);
/// Uncertainty-net parameter group (theta_u plus alpha_u).
pub struct UncertaintyGroup<'a>(pub &'a DecoderParams);

impl ParamGroup for DecoderParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.res.w1, &self.res.b1, &self.res.w2, &self.res.b2, &self.alpha_r_raw,
            &self.unc.w1, &self.unc.b1, &self.unc.w2, &self.unc.b2, &self.alpha_u_raw,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.res.w1, &mut self.res.b1, &mut self.res.w2, &mut self.res.b2, &mut self.alpha_r_raw,
            &mut self.unc.w1, &mut self.unc.b1, &mut self.unc.w2, &mut self.unc.b2, &mut self.alpha_u_raw,
        ]
    }
}

/// Index ranges of the residual and uncertainty groups inside the bound ids.
pub const RES_IDS: std::ops::Range<usize> = 0..5;
pub const UNC_IDS: std::ops::Range<usize> = 5..10;

pub struct DecoderBound {
    pub ids: Vec<NodeId>,
}

pub fn bind(params: &DecoderParams, tape: &mut Tape) -> Result<DecoderBound> {
    Ok(DecoderBound { ids: params.bind(tape)? })
}

fn two_layer(tape: &mut Tape, x: NodeId, ids: &[NodeId]) -> Result<NodeId> {
    let h = nn::linear(tape, x, ids[0], ids[1])?;
    let h = tape.lrelu(h, LRELU_SLOPE)?;
    let o = nn::linear(tape, h, ids[2], ids[3])?;
    tape.tanh(o)
}

/// Stochastic per-pixel spectrum perturbation from abundances and noise.
pub fn uncertainty_forward(
    params: &DecoderParams,
    bound: &DecoderBound,
    tape: &mut Tape,
    abundance: NodeId,
    noise: NodeId,
) -> Result<NodeId> {
    let nshape = tape.value(noise).shape();
    if nshape.len() != 2 || nshape[1] != params.noise_dim {
        return Err(Error::Shape(format!(
            "uncertainty noise must be [B, {}], got {:?}",
            params.noise_dim, nshape
        )));
    }
    let joint = tape.concat(&[abundance, noise], 1)?;
    two_layer(tape, joint, &bound.ids[UNC_IDS])
}

/// Deterministic endmember-refinement spectrum from abundances.
pub fn residual_forward(
    params: &DecoderParams,
    bound: &DecoderBound,
    tape: &mut Tape,
    abundance: NodeId,
) -> Result<NodeId> {
    let _ = params;
    two_layer(tape, abundance, &bound.ids[RES_IDS])
}

/// Box-mapped alpha node: range * sigmoid(raw).
fn alpha_node(tape: &mut Tape, raw: NodeId, range: f64) -> Result<NodeId> {
    let s = tape.sigmoid(raw)?;
    tape.scale(s, range)
}

/// x_hat = abundance-weighted endmember mixture + alpha_r * residual
///       + alpha_u * uncertainty.
pub fn reconstruct(
    params: &DecoderParams,
    bound: &DecoderBound,
    tape: &mut Tape,
    abundance: NodeId,
    endmembers: NodeId,
    noise: NodeId,
) -> Result<NodeId> {
    let mix = tape.matmul(abundance, endmembers)?;
    let res = residual_forward(params, bound, tape, abundance)?;
    let unc = uncertainty_forward(params, bound, tape, abundance, noise)?;
    let ar = alpha_node(tape, bound.ids[4], ALPHA_R_RANGE)?;
    let au = alpha_node(tape, bound.ids[9], ALPHA_U_RANGE)?;
    let rterm = tape.mul(res, ar)?;
    let uterm = tape.mul(unc, au)?;
    let s = tape.add(mix, rterm)?;
    tape.add(s, uterm)
}
