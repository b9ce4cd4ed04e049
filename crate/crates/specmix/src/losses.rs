//! Reconstruction loss (spectral-angle similarity plus optional l1 and
//! regularization terms) and the per-parameter-group loss weighting.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};

/// Clamp margin keeping arccos differentiable at parallel/antiparallel pairs.
const COS_MARGIN: f64 = 1e-12;

/// Per-parameter-group weighting of the two generator-side scalars. The
/// mixture weights apply to the similarity branch (w1/b1) only; the kernel's
/// weighting branch (w2/b2) trains with the extractor's pure reconstruction
/// loss.
pub const MIXTURE_RE_WEIGHT: f64 = 0.01;
pub const MIXTURE_ADV_WEIGHT: f64 = 0.1;
pub const ENCODER_RE_WEIGHT: f64 = 1.0;
pub const RESIDUAL_RE_WEIGHT: f64 = 0.001;
pub const UNCERTAINTY_ADV_WEIGHT: f64 = 0.001;

/// Per-sample spectral-angle similarity C = 1 - arccos(cos)/pi in (0, 1].
///
/// Both inputs are [B, D]; any all-zero row is rejected because the angle is
/// undefined there.
pub fn sad_similarity(tape: &mut Tape, x: NodeId, xhat: NodeId) -> Result<NodeId> {
    let xs = tape.value(x).shape().to_vec();
    let hs = tape.value(xhat).shape().to_vec();
    if xs.len() != 2 || xs != hs {
        return Err(Error::Shape(format!(
            "spectral-angle inputs must be matching [B,D], got {:?} vs {:?}",
            xs, hs
        )));
    }
    let d = xs[1];
    for (name, id) in [("x", x), ("x_hat", xhat)] {
        let v = tape.value(id);
        for bi in 0..xs[0] {
            if v.data()[bi * d..(bi + 1) * d].iter().all(|&e| e == 0.0) {
                return Err(Error::Contract(format!(
                    "spectral angle undefined: {} row {} is all zeros",
                    name, bi
                )));
            }
        }
    }
    let prod = tape.mul(x, xhat)?;
    let dot = tape.reduce_sum(prod, &[1])?;
    let x2 = tape.square(x)?;
    let h2 = tape.square(xhat)?;
    let xs2 = tape.reduce_sum(x2, &[1])?;
    let hs2 = tape.reduce_sum(h2, &[1])?;
    let xn = tape.sqrt(xs2)?;
    let hn = tape.sqrt(hs2)?;
    let nn = tape.mul(xn, hn)?;
    let cos = tape.div(dot, nn)?;
    let cc = tape.clamp(cos, -1.0 + COS_MARGIN, 1.0 - COS_MARGIN)?;
    let theta = tape.acos(cc)?;
    let scaled = tape.scale(theta, -1.0 / std::f64::consts::PI)?;
    let c = tape.add_const(scaled, 1.0)?;
    tape.reshape(c, vec![xs[0]])
}

/// Loss-term weights for `reconstruction_loss`.
#[derive(Debug, Clone, Copy)]
pub struct ReconWeights {
    /// mean-absolute-error weight
    pub lambda0: f64,
    /// abundance sparsity weight
    pub lambda1: f64,
    /// squared-l2 weight on the regularized parameter nodes
    pub lambda2: f64,
}

/// E[-log C] + lambda0*E[||x - x_hat||_1] + lambda1*||y_hat||_1/B
/// + lambda2*sum of squared norms over `reg_params`.
pub fn reconstruction_loss(
    tape: &mut Tape,
    x: NodeId,
    xhat: NodeId,
    yhat: NodeId,
    reg_params: &[NodeId],
    w: ReconWeights,
) -> Result<NodeId> {
    if w.lambda0 < 0.0 || w.lambda1 < 0.0 || w.lambda2 < 0.0 {
        return Err(Error::Config("loss weights must be nonnegative".into()));
    }
    let b = tape.value(x).shape()[0];
    let c = sad_similarity(tape, x, xhat)?;
    let logc = tape.ln(c)?;
    let nll = tape.mean_all(logc)?;
    let mut loss = tape.scale(nll, -1.0)?;
    if w.lambda0 > 0.0 {
        let diff = tape.sub(x, xhat)?;
        let ad = tape.abs(diff)?;
        let l1 = tape.reduce_sum(ad, &[1])?;
        let me = tape.mean_all(l1)?;
        let term = tape.scale(me, w.lambda0)?;
        loss = tape.add(loss, term)?;
    }
    if w.lambda1 > 0.0 {
        let ay = tape.abs(yhat)?;
        let s = tape.sum_all(ay)?;
        let term = tape.scale(s, w.lambda1 / b as f64)?;
        loss = tape.add(loss, term)?;
    }
    if w.lambda2 > 0.0 {
        for &p in reg_params {
            let sq = tape.square(p)?;
            let s = tape.sum_all(sq)?;
            let term = tape.scale(s, w.lambda2)?;
            loss = tape.add(loss, term)?;
        }
    }
    if !tape.value(loss).all_finite() {
        return Err(Error::NonFinite { op: "reconstruction_loss".into() });
    }
    Ok(loss)
}

/// The five per-group scalars derived from the reconstruction loss and the
/// generator-side adversarial loss computed on the same batch.
#[derive(Debug, Clone, Copy)]
pub struct GroupLosses {
    pub mixture: f64,
    pub encoder: f64,
    pub residual: f64,
    pub uncertainty: f64,
}

/// Scalar bookkeeping for the history log; the actual per-group gradients are
/// formed by linearly combining the two backward passes with these weights.
pub fn group_losses(l_re: f64, l_adv_gen: f64) -> GroupLosses {
    GroupLosses {
        mixture: MIXTURE_RE_WEIGHT * l_re + MIXTURE_ADV_WEIGHT * l_adv_gen,
        encoder: ENCODER_RE_WEIGHT * l_re,
        residual: RESIDUAL_RE_WEIGHT * l_re,
        uncertainty: UNCERTAINTY_ADV_WEIGHT * l_adv_gen,
    }
}
