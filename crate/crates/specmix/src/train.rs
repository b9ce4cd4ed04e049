//! The adversarial training loop: per-iteration critic ascent followed by a
//! generator-side step whose gradients are routed to each parameter group
//! with its own loss weighting.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{self, Mode};
use crate::autodiff::{GradientMap, NodeId, Tape, Tensor};
use crate::critic;
use crate::data::{BatchStream, PixelSet};
use crate::decoder::{self, EndmemberMatrix, RES_IDS, UNC_IDS};
use crate::encoder;
use crate::error::{Error, Result};
use crate::losses::{self, ReconWeights};
use crate::mixture;
use crate::model::UnmixModel;
use crate::optim::Adam;
use crate::params::ParamGroup;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// mean-absolute-error weight (0 by default; 1 for synthetic scenes)
    pub lambda0: f64,
    /// abundance sparsity weight
    pub lambda1: f64,
    /// squared-l2 regularizer on the feature-extractor parameters
    pub lambda2: f64,
    /// gradient-penalty weight
    pub lambda_pq: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub iterations: usize,
    /// materials (K)
    pub materials: usize,
    /// mixture components per material (N)
    pub components: usize,
    /// latent feature dimension (M)
    pub latent_dim: usize,
    /// uncertainty noise dimension (L); defaults to the material count
    pub noise_dim: Option<usize>,
    pub seed: u64,
    /// when false, raw spectra feed the mixture kernel directly
    pub use_encoder: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda0: 0.0,
            lambda1: 0.4,
            lambda2: 1e-5,
            lambda_pq: 10.0,
            lr: 0.002,
            beta1: 0.7,
            beta2: 0.999,
            batch: 64,
            iterations: 10_000,
            materials: 4,
            components: 8,
            latent_dim: 10,
            noise_dim: None,
            seed: 0,
            use_encoder: true,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_pq", self.lambda_pq),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{} must be finite and nonnegative", name)));
            }
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.materials < 2 {
            return Err(Error::Config("materials must be at least 2".into()));
        }
        if self.components < self.materials {
            return Err(Error::Config(format!(
                "components N={} must be >= materials K={}",
                self.components, self.materials
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim.unwrap_or(self.materials)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HistoryRow {
    pub iteration: usize,
    pub l_re: f64,
    pub l_adv: f64,
    pub penalty: f64,
}

pub fn write_history_csv<P: AsRef<Path>>(history: &[HistoryRow], path: P) -> Result<()> {
    let mut text = String::from("iteration,l_re,l_adv,penalty\n");
    for row in history {
        text.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e}\n",
            row.iteration, row.l_re, row.l_adv, row.penalty
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Decorrelated per-purpose RNG seeds from one master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    master.wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15))
}

fn gather_grads(tape: &Tape, map: &GradientMap, ids: &[NodeId]) -> Vec<Tensor> {
    ids.iter()
        .map(|&id| match map.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        })
        .collect()
}

/// Train a model on the pixel set. When `run_dir` is given, `config.json`,
/// `history.csv`, and periodic `checkpoint_<iter>.bin` files are written
/// there.
pub fn train(
    pixels: &PixelSet,
    endmembers: &EndmemberMatrix,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(UnmixModel, Vec<HistoryRow>)> {
    cfg.validate()?;
    if endmembers.bands() != pixels.bands {
        return Err(Error::Shape(format!(
            "endmembers span {} bands, pixels have {}",
            endmembers.bands(),
            pixels.bands
        )));
    }
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    }

    let mut model = UnmixModel::init(
        derive_seed(cfg.seed, 0),
        pixels.bands,
        cfg.materials,
        cfg.components,
        cfg.latent_dim,
        cfg.noise_dim(),
        cfg.use_encoder,
        endmembers.clone(),
    )?;
    // the encoder and critic consume l1-normalized spectra; reconstruction
    // happens in raw reflectance space where the endmember rows and the
    // box-bounded perturbation scales live

    let mut stream = BatchStream::new(pixels, cfg.batch, derive_seed(cfg.seed, 1))?;
    let mut rng_eta = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut rng_u = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));

    // the per-group loss constants act as learning-rate scalers (Adam's
    // normalization would cancel them as plain gradient coefficients): the
    // extractor and the kernel's weighting branch converge at full speed
    // while the similarity branch and the auxiliary decoder nets move slowly
    let mut adam_enc = Adam::new(cfg.lr, cfg.beta1, cfg.beta2)?;
    let mut adam_pi = Adam::new(cfg.lr, cfg.beta1, cfg.beta2)?;
    let mut adam_sim = Adam::new(cfg.lr * losses::MIXTURE_RE_WEIGHT, cfg.beta1, cfg.beta2)?;
    let mut adam_res = Adam::new(cfg.lr * losses::RESIDUAL_RE_WEIGHT, cfg.beta1, cfg.beta2)?;
    let mut adam_unc = Adam::new(cfg.lr * losses::UNCERTAINTY_ADV_WEIGHT, cfg.beta1, cfg.beta2)?;
    let mut adam_critic = Adam::new(cfg.lr, cfg.beta1, cfg.beta2)?;

    let recon_weights = ReconWeights {
        lambda0: cfg.lambda0,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
    };
    let noise_dim = cfg.noise_dim();
    let mut history = Vec::with_capacity(cfg.iterations);

    for it in 1..=cfg.iterations {
        let step = (|| -> Result<HistoryRow> {
            let mut tape = Tape::new();
            let (batch, batch_indices) = stream.next_batch();
            let x = tape.leaf(batch.clone(), false)?;
            // raw (un-normalized) spectra of the same batch for the
            // reflectance-space reconstruction target
            let raw_data: Vec<f64> = batch_indices
                .iter()
                .flat_map(|&i| {
                    let n = pixels.norms[i];
                    pixels.spectrum(i).iter().map(move |&v| v * n)
                })
                .collect();
            let x_raw = tape.leaf(Tensor::new(vec![cfg.batch, pixels.bands], raw_data)?, false)?;
            let enc_bound = match &model.encoder {
                Some(enc) => Some(encoder::bind(enc, &mut tape)?),
                None => None,
            };
            let z = match (&mut model.encoder, &enc_bound) {
                (Some(enc), Some(bound)) => {
                    let (z, _) = encoder::encode(enc, bound, &mut tape, x, Mode::Train)?;
                    z
                }
                _ => x,
            };
            let mix_bound = mixture::bind(&model.mixture, &mut tape)?;
            let yhat = mixture::abundances(&model.mixture, &mix_bound, &mut tape, z)?;
            let dec_bound = decoder::bind(&model.decoder, &mut tape)?;
            let en_node = tape.constant(endmembers.tensor().clone())?;
            let eta_data: Vec<f64> = (0..cfg.batch * noise_dim)
                .map(|_| rng_eta.sample::<f64, _>(StandardNormal))
                .collect();
            let eta = tape.constant(Tensor::new(vec![cfg.batch, noise_dim], eta_data)?)?;
            let xhat = decoder::reconstruct(&model.decoder, &dec_bound, &mut tape, yhat, en_node, eta)?;

            // l2-regularized set: whole feature extractor plus the mixture
            // weighting branch (the similarity branch w1/b1 is exempt)
            let mut reg_nodes: Vec<NodeId> = enc_bound
                .as_ref()
                .map(|b| b.ids.clone())
                .unwrap_or_default();
            reg_nodes.push(mix_bound.ids[2]);
            reg_nodes.push(mix_bound.ids[3]);
            let l_re =
                losses::reconstruction_loss(&mut tape, x_raw, xhat, yhat, &reg_nodes, recon_weights)?;

            // --- critic ascent on its own tape; reconstructions enter as
            // constants so no generator gradient leaks into this step
            let xhat_vals = tape.value(xhat).clone();
            let mut tape_c = Tape::new();
            let c_bound = critic::bind(&model.critic, &mut tape_c)?;
            let real = tape_c.leaf(batch, false)?;
            let fake_raw = tape_c.constant(xhat_vals)?;
            let fake = nn::l1_scale(&mut tape_c, fake_raw, 1)?;
            let u_data: Vec<f64> = (0..cfg.batch).map(|_| rng_u.gen_range(0.0..1.0)).collect();
            let u = Tensor::new(vec![cfg.batch, 1], u_data)?;
            let parts = critic::adversarial_loss(
                &mut model.critic, &c_bound, &mut tape_c, real, fake, u, cfg.lambda_pq, Mode::Train,
            )?;
            let l_adv = tape_c.value(parts.objective).item()?;
            let penalty = tape_c.value(parts.penalty).item()?;
            let neg_obj = tape_c.scale(parts.objective, -1.0)?;
            let g_c = tape_c.backward(neg_obj)?;
            let grads_c = gather_grads(&tape_c, &g_c, &c_bound.ids);
            adam_critic.step(&mut model.critic.tensors_mut(), &grads_c)?;

            // --- generator-side adversarial term against the updated critic
            let c2_bound = critic::bind(&model.critic, &mut tape)?;
            let xhat_scaled = nn::l1_scale(&mut tape, xhat, 1)?;
            let (d_fake, _) =
                critic::discriminate(&mut model.critic, &c2_bound, &mut tape, xhat_scaled, Mode::Train)?;
            let mean_d = tape.mean_all(d_fake)?;
            let l_adv_gen = tape.scale(mean_d, -1.0)?;

            let g_re = tape.backward(l_re)?;
            let g_adv = tape.backward(l_adv_gen)?;

            if let (Some(enc), Some(bound)) = (&mut model.encoder, &enc_bound) {
                let grads = gather_grads(&tape, &g_re, &bound.ids);
                adam_enc.step(&mut enc.tensors_mut(), &grads)?;
            }
            {
                // the similarity branch w1/b1 minimizes the mixed objective
                // through one slow optimizer (the adversarial term carries
                // its 10:1 relative weight inside the combined gradient); the
                // weighting branch w2/b2 follows the reconstruction loss
                // alone at full speed, like the feature extractor it belongs
                // with
                let re = gather_grads(&tape, &g_re, &mix_bound.ids);
                let adv = gather_grads(&tape, &g_adv, &mix_bound.ids[..2]);
                let adv_rel = losses::MIXTURE_ADV_WEIGHT / losses::MIXTURE_RE_WEIGHT;
                let mixed: Vec<Tensor> = re[..2]
                    .iter()
                    .zip(&adv)
                    .map(|(r, a)| {
                        let mut t = r.clone();
                        for (d, g) in t.data_mut().iter_mut().zip(a.data()) {
                            *d += adv_rel * g;
                        }
                        t
                    })
                    .collect();
                let mut all = model.mixture.tensors_mut();
                let (sim, pi) = all.split_at_mut(2);
                adam_sim.step(sim, &mixed)?;
                adam_pi.step(pi, &re[2..])?;
            }
            {
                let res_grads = gather_grads(&tape, &g_re, &dec_bound.ids[RES_IDS]);
                let unc_grads = gather_grads(&tape, &g_adv, &dec_bound.ids[UNC_IDS]);
                let mut all = model.decoder.tensors_mut();
                let (res, unc) = all.split_at_mut(RES_IDS.end);
                adam_res.step(res, &res_grads)?;
                adam_unc.step(unc, &unc_grads)?;
            }

            Ok(HistoryRow {
                iteration: it,
                l_re: tape.value(l_re).item()?,
                l_adv,
                penalty,
            })
        })();
        let row = match step {
            Ok(row) if row.l_re.is_finite() && row.l_adv.is_finite() => row,
            Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::Diverged(it)),
            Err(e) => return Err(e),
        };
        history.push(row);
        if let Some(dir) = run_dir {
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
                model.save(dir.join(format!("checkpoint_{}.bin", it)))?;
            }
        }
    }

    if let Some(dir) = run_dir {
        write_history_csv(&history, dir.join("history.csv"))?;
    }
    Ok((model, history))
}
