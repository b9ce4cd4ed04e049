//! The full unmixing model: all trainable parameter groups plus the fixed
//! endmember matrix, with a versioned binary on-disk format.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::Mode;
use crate::autodiff::{Tape, Tensor};
use crate::critic::CriticParams;
use crate::data::PixelSet;
use crate::decoder::{DecoderParams, EndmemberMatrix};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::mixture::{self, MixtureConfig, MixtureParams};
use crate::params::ParamGroup;

const MODEL_MAGIC: &[u8; 8] = b"DSCNPP01";

#[derive(Debug, Clone)]
pub struct UnmixModel {
    /// None when the feature extractor is ablated (raw spectra feed the kernel)
    pub encoder: Option<EncoderParams>,
    pub mixture: MixtureParams,
    pub decoder: DecoderParams,
    pub critic: CriticParams,
    /// raw (unnormalized) endmember rows
    pub endmembers: EndmemberMatrix,
    pub input_bands: usize,
}

impl UnmixModel {
    pub fn init(
        seed: u64,
        input_bands: usize,
        materials: usize,
        components: usize,
        latent_dim: usize,
        noise_dim: usize,
        use_encoder: bool,
        endmembers: EndmemberMatrix,
    ) -> Result<Self> {
        if endmembers.materials() != materials || endmembers.bands() != input_bands {
            return Err(Error::Shape(format!(
                "endmember matrix is {}x{}, model wants {}x{}",
                endmembers.materials(),
                endmembers.bands(),
                materials,
                input_bands
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = if use_encoder {
            Some(EncoderParams::init(&mut rng, input_bands, latent_dim)?)
        } else {
            None
        };
        let mixture_latent = if use_encoder { latent_dim } else { input_bands };
        let mixture = MixtureParams::init(
            &mut rng,
            MixtureConfig { materials, components, latent_dim: mixture_latent },
        )?;
        let decoder = DecoderParams::init(&mut rng, materials, noise_dim, input_bands);
        let critic = CriticParams::init(&mut rng, input_bands)?;
        Ok(UnmixModel { encoder, mixture, decoder, critic, endmembers, input_bands })
    }

    pub fn materials(&self) -> usize {
        self.mixture.cfg.materials
    }

    /// Abundances for every pixel in the set, row-major [pixel, material].
    ///
    /// The mixture kernel reads l1-normalized spectra but reconstruction is
    /// trained against raw reflectances with the raw endmember rows, so its
    /// outputs are physical abundances directly.
    pub fn predict_abundances(&mut self, pixels: &PixelSet, batch: usize) -> Result<Vec<f64>> {
        if pixels.bands != self.input_bands {
            return Err(Error::Shape(format!(
                "pixel set has {} bands, model expects {}",
                pixels.bands, self.input_bands
            )));
        }
        let k = self.materials();
        let mut out = Vec::with_capacity(pixels.len() * k);
        let mut start = 0usize;
        while start < pixels.len() {
            let end = (start + batch).min(pixels.len());
            let b = end - start;
            let data = pixels.spectra[start * pixels.bands..end * pixels.bands].to_vec();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![b, pixels.bands], data)?, false)?;
            let z = match &mut self.encoder {
                Some(enc) => {
                    let bound = crate::encoder::bind(enc, &mut tape)?;
                    let (z, _) = crate::encoder::encode(enc, &bound, &mut tape, x, Mode::Infer)?;
                    z
                }
                None => x,
            };
            let mbound = mixture::bind(&self.mixture, &mut tape)?;
            let y = mixture::abundances(&self.mixture, &mbound, &mut tape, z)?;
            out.extend_from_slice(&tape.value(y).data()[..b * k]);
            start = end;
        }
        Ok(out)
    }

    /// Abundances for every pixel of a cube, H*W*K pixel-major. Pixels with
    /// all-zero spectra (skipped by preprocessing) get a uniform abundance.
    pub fn predict_scene(&mut self, cube: &crate::data::SpectralCube, batch: usize) -> Result<Vec<f64>> {
        let set = crate::data::preprocess(cube)?;
        let k = self.materials();
        let kept = self.predict_abundances(&set, batch)?;
        let mut out = vec![1.0 / k as f64; cube.pixel_count() * k];
        for (i, &p) in set.kept.iter().enumerate() {
            out[p * k..(p + 1) * k].copy_from_slice(&kept[i * k..(i + 1) * k]);
        }
        Ok(out)
    }

    /// Active-response percentages of the feature extractor on a sample
    /// batch: (activation-before-normalization, the post-normalization
    /// ordering). None when the extractor is ablated.
    pub fn active_response(&mut self, pixels: &PixelSet, batch: usize) -> Result<Option<(f64, f64)>> {
        let enc = match &mut self.encoder {
            Some(e) => e,
            None => return Ok(None),
        };
        let b = batch.min(pixels.len()).max(2);
        let data = pixels.spectra[0..b * pixels.bands].to_vec();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![b, pixels.bands], data)?, false)?;
        let bound = crate::encoder::bind(enc, &mut tape)?;
        // run both orderings on frozen statistics so neither pass perturbs
        // the model state
        let saved = enc.bn_state.clone();
        let (_, pre_trace) = crate::encoder::encode(enc, &bound, &mut tape, x, Mode::Train)?;
        enc.bn_state = saved.clone();
        let (_, post_trace) = crate::encoder::encode_post_norm(enc, &bound, &mut tape, x, Mode::Train)?;
        enc.bn_state = saved;
        let pre = crate::encoder::active_response_fraction(&tape, &pre_trace);
        let post = crate::encoder::active_response_fraction(&tape, &post_trace);
        Ok(Some((pre, post)))
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        let header = [
            self.encoder.is_some() as u32,
            self.input_bands as u32,
            self.mixture.cfg.materials as u32,
            self.mixture.cfg.components as u32,
            self.mixture.cfg.latent_dim as u32,
            self.decoder.noise_dim as u32,
        ];
        for v in header {
            out.extend_from_slice(&v.to_le_bytes());
        }
        write_tensor(&mut out, self.endmembers.tensor());
        if let Some(enc) = &self.encoder {
            write_tensors(&mut out, &enc.tensors());
            write_vec(&mut out, &enc.bn_state.running_mean);
            write_vec(&mut out, &enc.bn_state.running_var);
        }
        write_tensors(&mut out, &self.mixture.tensors());
        write_tensors(&mut out, &self.decoder.tensors());
        write_tensors(&mut out, &self.critic.tensors());
        for state in [&self.critic.bn1_state, &self.critic.bn2_state, &self.critic.bn3_state] {
            write_vec(&mut out, &state.running_mean);
            write_vec(&mut out, &state.running_var);
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MODEL_MAGIC {
            return Err(Error::Format("bad model magic, expected \"DSCNPP01\"".into()));
        }
        let use_encoder = r.u32()? != 0;
        let input_bands = r.u32()? as usize;
        let materials = r.u32()? as usize;
        let components = r.u32()? as usize;
        let latent_dim = r.u32()? as usize;
        let noise_dim = r.u32()? as usize;
        let endmembers = EndmemberMatrix::new(r.tensor()?)?;
        let mut model = UnmixModel::init(
            0, input_bands, materials, components, latent_dim, noise_dim, use_encoder, endmembers,
        )?;
        if let Some(enc) = &mut model.encoder {
            read_into(&mut r, &mut enc.tensors_mut())?;
            enc.bn_state.running_mean = r.vec()?;
            enc.bn_state.running_var = r.vec()?;
        }
        read_into(&mut r, &mut model.mixture.tensors_mut())?;
        read_into(&mut r, &mut model.decoder.tensors_mut())?;
        read_into(&mut r, &mut model.critic.tensors_mut())?;
        for state in [
            &mut model.critic.bn1_state,
            &mut model.critic.bn2_state,
            &mut model.critic.bn3_state,
        ] {
            state.running_mean = r.vec()?;
            state.running_var = r.vec()?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "trailing bytes in model file at offset {}",
                r.pos
            )));
        }
        Ok(model)
    }
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_tensors(out: &mut Vec<u8>, ts: &[&Tensor]) {
    out.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for t in ts {
        write_tensor(out, t);
    }
}

fn write_vec(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for &x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "model file truncated at byte offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        self.f64s(n)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        Tensor::new(shape, self.f64s(n)?)
    }
}

fn read_into(r: &mut Reader<'_>, targets: &mut [&mut Tensor]) -> Result<()> {
    let count = r.u32()? as usize;
    if count != targets.len() {
        return Err(Error::Format(format!(
            "model section holds {} tensors, expected {}",
            count,
            targets.len()
        )));
    }
    for t in targets.iter_mut() {
        let loaded = r.tensor()?;
        if loaded.shape() != t.shape() {
            return Err(Error::Format(format!(
                "model tensor shape {:?} does not match expected {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        **t = loaded;
    }
    Ok(())
}
