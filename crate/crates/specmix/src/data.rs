//! Cube and endmember ingestion, band removal, the synthetic scene
//! generator, and the l1-normalized pixel batch stream.
//!
//! Cube container format (HSC): a 32-byte header — magic `HSC1`, then
//! little-endian u32 height, width, bands, flags, then 12 reserved zero
//! bytes — followed by height*width*bands little-endian float32 samples in
//! band-interleaved-by-pixel order.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::decoder::EndmemberMatrix;
use crate::error::{Error, Result};

const HSC_MAGIC: &[u8; 4] = b"HSC1";
const HSC_HEADER_LEN: usize = 32;

/// H x W x D reflectance raster, float64 in memory, BIP layout.
#[derive(Debug, Clone)]
pub struct SpectralCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// height*width*bands values; pixel-major, band-minor
    pub data: Vec<f64>,
    pub wavelengths: Option<Vec<f64>>,
    /// original 0-based indices of the kept bands
    pub band_mask: Vec<usize>,
}

impl SpectralCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * bands {
            return Err(Error::Shape(format!(
                "cube payload has {} values, expected {}*{}*{}",
                data.len(),
                height,
                width,
                bands
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("cube contains non-finite reflectances".into()));
        }
        Ok(SpectralCube {
            height,
            width,
            bands,
            data,
            wavelengths: None,
            band_mask: (0..bands).collect(),
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.bands..(idx + 1) * self.bands]
    }
}

pub fn load_cube<P: AsRef<Path>>(path: P) -> Result<SpectralCube> {
    let mut file = std::fs::File::open(&path)?;
    let mut header = [0u8; HSC_HEADER_LEN];
    file.read_exact(&mut header).map_err(|_| {
        Error::Format(format!("file shorter than the {}-byte header", HSC_HEADER_LEN))
    })?;
    if &header[0..4] != HSC_MAGIC {
        return Err(Error::Format("bad magic at byte offset 0, expected \"HSC1\"".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, d) = (word(4), word(8), word(12));
    let expected = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(d))
        .ok_or_else(|| Error::Format("shape overflow in header at byte offset 4".into()))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(Error::Format(format!(
            "payload at byte offset {} holds {} bytes, expected {} for {}x{}x{}",
            HSC_HEADER_LEN,
            payload.len(),
            expected * 4,
            h,
            w,
            d
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    SpectralCube::new(h, w, d, data)
}

pub fn save_cube<P: AsRef<Path>>(cube: &SpectralCube, path: P) -> Result<()> {
    let mut out = Vec::with_capacity(HSC_HEADER_LEN + cube.data.len() * 4);
    out.extend_from_slice(HSC_MAGIC);
    for v in [cube.height, cube.width, cube.bands, 0usize] {
        let v32 = u32::try_from(v).map_err(|_| Error::Format("cube extent exceeds u32".into()))?;
        out.extend_from_slice(&v32.to_le_bytes());
    }
    out.extend_from_slice(&[0u8; 12]);
    for &v in &cube.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Urban scene: 1-based bands dropped for water absorption and noise.
pub fn urban_removal() -> Vec<usize> {
    let mut v: Vec<usize> = (1..=4).collect();
    v.push(76);
    v.push(87);
    v.extend(101..=111);
    v.extend(136..=153);
    v.extend(198..=210);
    v
}

/// Jasper Ridge scene removal list, 1-based.
pub fn jasper_removal() -> Vec<usize> {
    let mut v: Vec<usize> = (1..=3).collect();
    v.extend(108..=112);
    v.extend(154..=166);
    v.extend(220..=224);
    v
}

/// Named removal preset for the CLI: urban | jasper | none.
pub fn band_preset(name: &str) -> Result<Vec<usize>> {
    match name {
        "urban" => Ok(urban_removal()),
        "jasper" => Ok(jasper_removal()),
        "none" => Ok(Vec::new()),
        other => Err(Error::Config(format!("unknown band preset `{}`", other))),
    }
}

/// Drop the listed 1-based bands from the cube.
pub fn remove_bands(cube: &SpectralCube, removal: &[usize]) -> Result<SpectralCube> {
    let mut drop = vec![false; cube.bands];
    for &b in removal {
        if b == 0 || b > cube.bands {
            return Err(Error::Param(format!(
                "band {} out of range for a {}-band cube (bands are 1-based)",
                b, cube.bands
            )));
        }
        drop[b - 1] = true;
    }
    let kept: Vec<usize> = (0..cube.bands).filter(|&i| !drop[i]).collect();
    if kept.is_empty() {
        return Err(Error::Param("band removal would drop every band".into()));
    }
    let mut data = Vec::with_capacity(cube.pixel_count() * kept.len());
    for p in 0..cube.pixel_count() {
        let px = cube.pixel(p);
        data.extend(kept.iter().map(|&i| px[i]));
    }
    let mut out = SpectralCube::new(cube.height, cube.width, kept.len(), data)?;
    out.band_mask = kept.iter().map(|&i| cube.band_mask[i]).collect();
    out.wavelengths = cube
        .wavelengths
        .as_ref()
        .map(|ws| kept.iter().map(|&i| ws[i]).collect());
    Ok(out)
}

pub fn load_endmembers<P: AsRef<Path>>(path: P) -> Result<EndmemberMatrix> {
    let text = std::fs::read_to_string(&path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    Error::Format(format!("line {}: `{}` is not a number", lineno + 1, f.trim()))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Format(format!(
                    "line {}: {} columns, expected {} (ragged rows)",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("endmember file holds no rows".into()));
    }
    let (k, d) = (rows.len(), rows[0].len());
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    EndmemberMatrix::new(Tensor::new(vec![k, d], data)?)
}

pub fn save_endmembers<P: AsRef<Path>>(e: &EndmemberMatrix, path: P) -> Result<()> {
    let d = e.bands();
    let mut text = String::new();
    for k in 0..e.materials() {
        let row: Vec<String> = e.tensor().data()[k * d..(k + 1) * d]
            .iter()
            .map(|v| format!("{:.17e}", v))
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Per-pixel simplex abundances plus the mixing endmembers of a scene.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    pub materials: usize,
    /// height*width*materials, pixel-major
    pub abundances: Vec<f64>,
    pub endmembers: EndmemberMatrix,
}

impl GroundTruth {
    pub fn abundance_cube(&self) -> Result<SpectralCube> {
        SpectralCube::new(self.height, self.width, self.materials, self.abundances.clone())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub materials: usize,
    pub bands: usize,
    pub blob_count: usize,
    pub blob_sigma: f64,
    pub blob_peak: f64,
    /// additive Gaussian noise level; None disables noise
    pub noise_snr_db: Option<f64>,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 60,
            width: 60,
            materials: 4,
            bands: 200,
            blob_count: 5,
            blob_sigma: 6.0,
            blob_peak: 0.9,
            noise_snr_db: Some(30.0),
        }
    }
}

/// Procedurally smooth nonnegative endmember library: each spectrum is a sum
/// of Gaussians over the band axis plus a small base reflectance.
pub fn procedural_endmembers<R: Rng>(rng: &mut R, materials: usize, bands: usize) -> Result<EndmemberMatrix> {
    let mut data = Vec::with_capacity(materials * bands);
    for _ in 0..materials {
        let humps = 4;
        let mut centers = Vec::new();
        let mut widths = Vec::new();
        let mut amps = Vec::new();
        for _ in 0..humps {
            centers.push(rng.gen_range(0.0..bands as f64));
            widths.push(rng.gen_range(bands as f64 / 20.0..bands as f64 / 4.0));
            amps.push(rng.gen_range(0.2..1.0));
        }
        let base = rng.gen_range(0.02..0.1);
        for d in 0..bands {
            let mut v = base;
            for j in 0..humps {
                let t = (d as f64 - centers[j]) / widths[j];
                v += amps[j] * (-0.5 * t * t).exp();
            }
            data.push(v);
        }
    }
    EndmemberMatrix::new(Tensor::new(vec![materials, bands], data)?)
}

/// Background-plus-Gaussian-blob scene with linear mixing and optional
/// additive Gaussian noise at the given SNR. Material 0 is the background.
pub fn synthesize_scene(
    seed: u64,
    params: &SceneParams,
    library: Option<EndmemberMatrix>,
) -> Result<(SpectralCube, GroundTruth)> {
    if params.materials < 2 {
        return Err(Error::Param(format!(
            "scene needs at least 2 materials, got {}",
            params.materials
        )));
    }
    if params.height == 0 || params.width == 0 || params.bands == 0 {
        return Err(Error::Param("scene extents must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let endmembers = match library {
        Some(e) => {
            if e.materials() != params.materials || e.bands() != params.bands {
                return Err(Error::Shape(format!(
                    "endmember library is {}x{}, scene wants {}x{}",
                    e.materials(),
                    e.bands(),
                    params.materials,
                    params.bands
                )));
            }
            e
        }
        None => procedural_endmembers(&mut rng, params.materials, params.bands)?,
    };
    let (h, w, k, d) = (params.height, params.width, params.materials, params.bands);
    let pixels = h * w;
    // raw abundance stack: background fixed at 1, blobs added on the others
    let mut raw = vec![0.0f64; pixels * k];
    for p in 0..pixels {
        raw[p * k] = 1.0;
    }
    for mat in 1..k {
        for _ in 0..params.blob_count {
            let cr = rng.gen_range(0.0..h as f64);
            let cc = rng.gen_range(0.0..w as f64);
            for r in 0..h {
                for c in 0..w {
                    let dr = r as f64 - cr;
                    let dc = c as f64 - cc;
                    let g = params.blob_peak
                        * (-(dr * dr + dc * dc) / (2.0 * params.blob_sigma * params.blob_sigma)).exp();
                    raw[(r * w + c) * k + mat] += g;
                }
            }
        }
    }
    let mut abundances = vec![0.0f64; pixels * k];
    for p in 0..pixels {
        let s: f64 = raw[p * k..(p + 1) * k].iter().sum();
        for m in 0..k {
            abundances[p * k + m] = raw[p * k + m] / s;
        }
    }
    // linear mixture per pixel
    let ed = endmembers.tensor().data();
    let mut cube_data = vec![0.0f64; pixels * d];
    for p in 0..pixels {
        for m in 0..k {
            let y = abundances[p * k + m];
            if y == 0.0 {
                continue;
            }
            for b in 0..d {
                cube_data[p * d + b] += y * ed[m * d + b];
            }
        }
    }
    if let Some(snr_db) = params.noise_snr_db {
        let signal_power: f64 = cube_data.iter().map(|v| v * v).sum::<f64>() / cube_data.len() as f64;
        let noise_power = signal_power / 10f64.powf(snr_db / 10.0);
        let sigma = noise_power.sqrt();
        for v in &mut cube_data {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let cube = SpectralCube::new(h, w, d, cube_data)?;
    let gt = GroundTruth { height: h, width: w, materials: k, abundances, endmembers };
    Ok((cube, gt))
}

/// Flattened, l1-normalized pixels of a cube with their original norms.
#[derive(Debug, Clone)]
pub struct PixelSet {
    pub bands: usize,
    /// normalized spectra, pixel-major
    pub spectra: Vec<f64>,
    /// per-kept-pixel l1 norm of the raw spectrum
    pub norms: Vec<f64>,
    /// linear indices of the kept pixels within the source cube
    pub kept: Vec<usize>,
    /// number of all-zero pixels skipped
    pub skipped_zero: usize,
}

impl PixelSet {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn spectrum(&self, i: usize) -> &[f64] {
        &self.spectra[i * self.bands..(i + 1) * self.bands]
    }
}

/// Flatten a cube to l1-normalized pixels, skipping all-zero spectra.
pub fn preprocess(cube: &SpectralCube) -> Result<PixelSet> {
    let d = cube.bands;
    let mut spectra = Vec::new();
    let mut norms = Vec::new();
    let mut kept = Vec::new();
    let mut skipped = 0usize;
    for p in 0..cube.pixel_count() {
        let px = cube.pixel(p);
        let norm: f64 = px.iter().map(|v| v.abs()).sum();
        if norm == 0.0 {
            skipped += 1;
            continue;
        }
        spectra.extend(px.iter().map(|v| v / norm));
        norms.push(norm);
        kept.push(p);
    }
    if kept.is_empty() {
        return Err(Error::Format("cube holds no nonzero pixels".into()));
    }
    Ok(PixelSet { bands: d, spectra, norms, kept, skipped_zero: skipped })
}

/// Seeded epoch-shuffled batch iterator over a pixel set.
pub struct BatchStream<'a> {
    set: &'a PixelSet,
    batch: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(set: &'a PixelSet, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Param("batch size must be positive".into()));
        }
        let mut s = BatchStream {
            set,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..set.len()).collect(),
            pos: 0,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    /// Next batch as a [B, D] tensor; reshuffles when the epoch wraps, so
    /// every pixel is visited once per epoch.
    pub fn next_batch(&mut self) -> (Tensor, Vec<usize>) {
        let d = self.set.bands;
        let mut data = Vec::with_capacity(self.batch * d);
        let mut indices = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let idx = self.order[self.pos];
            self.pos += 1;
            indices.push(idx);
            data.extend_from_slice(self.set.spectrum(idx));
        }
        (Tensor::new(vec![self.batch, d], data).expect("batch shape"), indices)
    }
}
