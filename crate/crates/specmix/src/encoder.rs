//! Spectral convolution feature extractor: a D-band spectrum goes through a
//! wide first convolution, an inception block of three kernel sizes, and a
//! final projection to an M-dimensional latent feature.
//!
//! Layer stack (output length for input D):
//!   conv(10ch, k21)            -> D x 10
//!   lrelu, avgpool(5), BN      -> D/5 x 10
//!   conv k3 | k5 | k7, concat  -> D/5 x 30
//!   lrelu, avgpool(2), SN      -> D/10 x 30
//!   conv(10ch, k3)             -> D/10 x 10
//!   lrelu, avgpool(2), SN      -> D/20 x 10
//!   flatten, linear(M), lrelu  -> M

use rand::Rng;

use crate::autodiff::nn::{self, BnState, Mode};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::params::{he_init, ParamGroup};

pub const MIN_BANDS: usize = 21;

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub inc3_w: Tensor,
    pub inc3_b: Tensor,
    pub inc5_w: Tensor,
    pub inc5_b: Tensor,
    pub inc7_w: Tensor,
    pub inc7_b: Tensor,
    pub conv4_w: Tensor,
    pub conv4_b: Tensor,
    pub lin_w: Tensor,
    pub lin_b: Tensor,
    pub bn_state: BnState,
    pub input_bands: usize,
    pub latent_dim: usize,
}

/// Output length after the three pooling stages.
pub fn final_positions(d: usize) -> usize {
    let p1 = (d + 4) / 5;
    let p2 = (p1 + 1) / 2;
    (p2 + 1) / 2
}

impl EncoderParams {
    pub fn init<R: Rng>(rng: &mut R, input_bands: usize, latent_dim: usize) -> Result<Self> {
        if input_bands < MIN_BANDS {
            return Err(Error::Config(format!(
                "encoder needs at least {} spectral bands, got {}",
                MIN_BANDS, input_bands
            )));
        }
        let flat = final_positions(input_bands) * 10;
        Ok(EncoderParams {
            conv1_w: he_init(rng, &[21, 1, 10], 21),
            conv1_b: Tensor::zeros(&[10]),
            bn_gamma: Tensor::full(&[10], 1.0),
            bn_beta: Tensor::zeros(&[10]),
            inc3_w: he_init(rng, &[3, 10, 10], 3 * 10),
            inc3_b: Tensor::zeros(&[10]),
            inc5_w: he_init(rng, &[5, 10, 10], 5 * 10),
            inc5_b: Tensor::zeros(&[10]),
            inc7_w: he_init(rng, &[7, 10, 10], 7 * 10),
            inc7_b: Tensor::zeros(&[10]),
            conv4_w: he_init(rng, &[3, 30, 10], 3 * 30),
            conv4_b: Tensor::zeros(&[10]),
            lin_w: he_init(rng, &[flat, latent_dim], flat),
            lin_b: Tensor::zeros(&[latent_dim]),
            bn_state: BnState::new(10),
            input_bands,
            latent_dim,
        })
    }
}

impl ParamGroup for EncoderParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1_w, &self.conv1_b, &self.bn_gamma, &self.bn_beta,
            &self.inc3_w, &self.inc3_b, &self.inc5_w, &self.inc5_b,
            &self.inc7_w, &self.inc7_b, &self.conv4_w, &self.conv4_b,
            &self.lin_w, &self.lin_b,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1_w, &mut self.conv1_b, &mut self.bn_gamma, &mut self.bn_beta,
            &mut self.inc3_w, &mut self.inc3_b, &mut self.inc5_w, &mut self.inc5_b,
            &mut self.inc7_w, &mut self.inc7_b, &mut self.conv4_w, &mut self.conv4_b,
            &mut self.lin_w, &mut self.lin_b,
        ]
    }
}

/// Encoder parameters bound onto a tape for one forward pass.
pub struct EncoderBound {
    pub ids: Vec<NodeId>,
}

impl EncoderBound {
    fn id(&self, i: usize) -> NodeId {
        self.ids[i]
    }
}

/// Pre-pooling LReLU activations and the layer-shape trail of one forward.
pub struct EncoderTrace {
    pub lrelu_nodes: Vec<NodeId>,
    pub layer_shapes: Vec<(&'static str, Vec<usize>)>,
}

pub fn bind(params: &EncoderParams, tape: &mut Tape) -> Result<EncoderBound> {
    Ok(EncoderBound { ids: params.bind(tape)? })
}

/// Forward pass for a batch of spectra [B, D]; returns the latent [B, M].
pub fn encode(
    params: &mut EncoderParams,
    bound: &EncoderBound,
    tape: &mut Tape,
    batch: NodeId,
    mode: Mode,
) -> Result<(NodeId, EncoderTrace)> {
    let shape = tape.value(batch).shape().to_vec();
    if shape.len() != 2 || shape[1] != params.input_bands {
        return Err(Error::Shape(format!(
            "encoder expects [B, {}], got {:?}",
            params.input_bands, shape
        )));
    }
    let (b, d) = (shape[0], shape[1]);
    let mut trace = EncoderTrace { lrelu_nodes: Vec::new(), layer_shapes: Vec::new() };
    let log = |tape: &Tape, name: &'static str, id: NodeId| {
        (name, tape.value(id).shape().to_vec())
    };

    let x = tape.reshape(batch, vec![b, d, 1])?;
    let c1 = nn::conv1d_bias(tape, x, bound.id(0), bound.id(1), 1)?;
    trace.layer_shapes.push(log(tape, "conv1", c1));
    let a1 = tape.lrelu(c1, nn::LRELU_SLOPE)?;
    trace.lrelu_nodes.push(a1);
    let p1 = tape.avg_pool1d(a1, 5)?;
    let n1 = nn::batch_norm(tape, p1, bound.id(2), bound.id(3), &mut params.bn_state, mode)?;
    trace.layer_shapes.push(log(tape, "pool5+bn", n1));

    let i3 = nn::conv1d_bias(tape, n1, bound.id(4), bound.id(5), 1)?;
    let i5 = nn::conv1d_bias(tape, n1, bound.id(6), bound.id(7), 1)?;
    let i7 = nn::conv1d_bias(tape, n1, bound.id(8), bound.id(9), 1)?;
    let cat = tape.concat(&[i3, i5, i7], 2)?;
    trace.layer_shapes.push(log(tape, "inception_concat", cat));
    let a2 = tape.lrelu(cat, nn::LRELU_SLOPE)?;
    trace.lrelu_nodes.push(a2);
    let p2 = tape.avg_pool1d(a2, 2)?;
    let n2 = nn::spectral_norm(tape, p2)?;
    trace.layer_shapes.push(log(tape, "pool2+sn", n2));

    let c4 = nn::conv1d_bias(tape, n2, bound.id(10), bound.id(11), 1)?;
    trace.layer_shapes.push(log(tape, "conv4", c4));
    let a3 = tape.lrelu(c4, nn::LRELU_SLOPE)?;
    trace.lrelu_nodes.push(a3);
    let p3 = tape.avg_pool1d(a3, 2)?;
    let n3 = nn::spectral_norm(tape, p3)?;
    trace.layer_shapes.push(log(tape, "pool2+sn2", n3));

    let flat_len = final_positions(d) * 10;
    let flat = tape.reshape(n3, vec![b, flat_len])?;
    let lin = nn::linear(tape, flat, bound.id(12), bound.id(13))?;
    let z = tape.lrelu(lin, nn::LRELU_SLOPE)?;
    trace.layer_shapes.push(log(tape, "linear", z));
    Ok((z, trace))
}

/// Diagnostic-only variant that applies each normalization BEFORE its
/// activation (the ordering this architecture abandons). Used solely to
/// report the active-response comparison; shares the same parameters.
pub fn encode_post_norm(
    params: &mut EncoderParams,
    bound: &EncoderBound,
    tape: &mut Tape,
    batch: NodeId,
    mode: Mode,
) -> Result<(NodeId, EncoderTrace)> {
    let shape = tape.value(batch).shape().to_vec();
    if shape.len() != 2 || shape[1] != params.input_bands {
        return Err(Error::Shape(format!(
            "encoder expects [B, {}], got {:?}",
            params.input_bands, shape
        )));
    }
    let (b, d) = (shape[0], shape[1]);
    let mut trace = EncoderTrace { lrelu_nodes: Vec::new(), layer_shapes: Vec::new() };

    let x = tape.reshape(batch, vec![b, d, 1])?;
    let c1 = nn::conv1d_bias(tape, x, bound.id(0), bound.id(1), 1)?;
    let p1 = tape.avg_pool1d(c1, 5)?;
    let n1 = nn::batch_norm(tape, p1, bound.id(2), bound.id(3), &mut params.bn_state, mode)?;
    let a1 = tape.lrelu(n1, nn::LRELU_SLOPE)?;
    trace.lrelu_nodes.push(a1);

    let i3 = nn::conv1d_bias(tape, a1, bound.id(4), bound.id(5), 1)?;
    let i5 = nn::conv1d_bias(tape, a1, bound.id(6), bound.id(7), 1)?;
    let i7 = nn::conv1d_bias(tape, a1, bound.id(8), bound.id(9), 1)?;
    let cat = tape.concat(&[i3, i5, i7], 2)?;
    let p2 = tape.avg_pool1d(cat, 2)?;
    let n2 = nn::spectral_norm(tape, p2)?;
    let a2 = tape.lrelu(n2, nn::LRELU_SLOPE)?;
    trace.lrelu_nodes.push(a2);

    let c4 = nn::conv1d_bias(tape, a2, bound.id(10), bound.id(11), 1)?;
    let p3 = tape.avg_pool1d(c4, 2)?;
    let n3 = nn::spectral_norm(tape, p3)?;
    let a3 = tape.lrelu(n3, nn::LRELU_SLOPE)?;
    trace.lrelu_nodes.push(a3);

    let flat_len = final_positions(d) * 10;
    let flat = tape.reshape(a3, vec![b, flat_len])?;
    let lin = nn::linear(tape, flat, bound.id(12), bound.id(13))?;
    let z = tape.lrelu(lin, nn::LRELU_SLOPE)?;
    Ok((z, trace))
}

/// Percentage of strictly positive entries across the three pre-pooling
/// LReLU activations of a forward pass.
pub fn active_response_fraction(tape: &Tape, trace: &EncoderTrace) -> f64 {
    let mut pos = 0usize;
    let mut total = 0usize;
    for &id in &trace.lrelu_nodes {
        let v = tape.value(id);
        pos += v.data().iter().filter(|&&x| x > 0.0).count();
        total += v.len();
    }
    if total == 0 {
        0.0
    } else {
        100.0 * pos as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(b: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::params::gaussian_init(&mut rng, &[b, d], 1.0)
    }

    #[test]
    fn table_shapes_for_200_bands() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = EncoderParams::init(&mut rng, 200, 10).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&params, &mut tape).unwrap();
        let x = tape.leaf(batch(4, 200, 1), false).unwrap();
        let (z, trace) = encode(&mut params, &bound, &mut tape, x, Mode::Train).unwrap();
        let shapes: Vec<Vec<usize>> = trace.layer_shapes.iter().map(|(_, s)| s.clone()).collect();
        assert_eq!(shapes[0], vec![4, 200, 10]);
        assert_eq!(shapes[1], vec![4, 40, 10]);
        assert_eq!(shapes[2], vec![4, 40, 30]);
        assert_eq!(shapes[3], vec![4, 20, 30]);
        assert_eq!(shapes[4], vec![4, 20, 10]);
        assert_eq!(shapes[5], vec![4, 10, 10]);
        assert_eq!(tape.value(z).shape(), &[4, 10]);
    }

    #[test]
    fn normalization_placement_follows_layer_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = EncoderParams::init(&mut rng, 100, 10).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&params, &mut tape).unwrap();
        let x = tape.leaf(batch(3, 100, 2), false).unwrap();
        let (_, trace) = encode(&mut params, &bound, &mut tape, x, Mode::Train).unwrap();
        let names: Vec<&str> = trace.layer_shapes.iter().map(|(n, _)| *n).collect();
        assert_eq!(names, vec!["conv1", "pool5+bn", "inception_concat", "pool2+sn", "conv4", "pool2+sn2", "linear"]);
    }

    #[test]
    fn identical_pixels_give_identical_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = EncoderParams::init(&mut rng, 50, 10).unwrap();
        let mut row = batch(1, 50, 4).data().to_vec();
        let mut data = row.clone();
        data.append(&mut row);
        let t = Tensor::new(vec![2, 50], data).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&params, &mut tape).unwrap();
        let x = tape.leaf(t, false).unwrap();
        let (z, _) = encode(&mut params, &bound, &mut tape, x, Mode::Train).unwrap();
        let zv = tape.value(z);
        let (a, b) = zv.data().split_at(10);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_narrow_spectra() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(EncoderParams::init(&mut rng, 20, 10), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_for_jasper_like_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = EncoderParams::init(&mut rng, 198, 10).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&params, &mut tape).unwrap();
        let x = tape.leaf(batch(4, 198, 6), false).unwrap();
        let (z, _) = encode(&mut params, &bound, &mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(z).shape(), &[4, 10]);
        assert!(tape.value(z).all_finite());
    }

    #[test]
    fn active_fraction_is_100_for_all_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = EncoderParams::init(&mut rng, 50, 10).unwrap();
        // force an all-positive first activation via huge positive bias
        params.conv1_b = Tensor::full(&[10], 1e6);
        params.inc3_b = Tensor::full(&[10], 1e6);
        params.inc5_b = Tensor::full(&[10], 1e6);
        params.inc7_b = Tensor::full(&[10], 1e6);
        params.conv4_b = Tensor::full(&[10], 1e6);
        let mut tape = Tape::new();
        let bound = bind(&params, &mut tape).unwrap();
        let x = tape.leaf(batch(2, 50, 8), false).unwrap();
        let (_, trace) = encode(&mut params, &bound, &mut tape, x, Mode::Train).unwrap();
        assert_eq!(active_response_fraction(&tape, &trace), 100.0);
    }
}
