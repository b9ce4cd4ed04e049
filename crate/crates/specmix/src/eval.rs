//! Metrics, repeated-run statistics, the constrained least-squares baseline,
//! and plotting exports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::EndmemberMatrix;
use crate::error::{Error, Result};
use crate::train::derive_seed;

/// Root-mean-square abundance error: sqrt of the mean over pixels of the
/// squared per-pixel K-vector error norm. Inputs are pixel-major [L, K].
pub fn rmse(truth: &[f64], estimate: &[f64], materials: usize) -> Result<f64> {
    if truth.len() != estimate.len() || materials == 0 || truth.len() % materials != 0 {
        return Err(Error::Shape(format!(
            "rmse inputs disagree: {} vs {} values for {} materials",
            truth.len(),
            estimate.len(),
            materials
        )));
    }
    let pixels = truth.len() / materials;
    let ss: f64 = truth
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / pixels as f64).sqrt())
}

/// Per-material RMSE over pixels, one value per material.
pub fn rmse_per_material(truth: &[f64], estimate: &[f64], materials: usize) -> Result<Vec<f64>> {
    rmse(truth, estimate, materials)?;
    let pixels = truth.len() / materials;
    let mut out = vec![0.0; materials];
    for p in 0..pixels {
        for k in 0..materials {
            let d = truth[p * materials + k] - estimate[p * materials + k];
            out[k] += d * d;
        }
    }
    for v in &mut out {
        *v = (*v / pixels as f64).sqrt();
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_rmse: f64,
    pub per_material_rmse: Vec<f64>,
    /// mean over repeated runs (equals overall_rmse for a single run)
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub runs: usize,
    pub failed_runs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active_response_percent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active_response_post_percent: Option<f64>,
    /// directional claim: activation-before-normalization keeps more units
    /// active than the post-normalization ordering (informational only)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active_pre_exceeds_post: Option<bool>,
    pub runtime_seconds: f64,
}

/// Run a seeded train/evaluate closure `runs` times with derived seeds and
/// aggregate the scores. Diverging runs are excluded and counted.
pub fn repeated_eval<F>(master_seed: u64, runs: usize, mut run: F) -> Result<(f64, f64, usize, Vec<f64>)>
where
    F: FnMut(u64) -> Result<f64>,
{
    if runs == 0 {
        return Err(Error::Param("repeated evaluation needs at least one run".into()));
    }
    let mut scores = Vec::new();
    let mut failures = 0usize;
    for i in 0..runs {
        match run(derive_seed(master_seed, i as u64)) {
            Ok(score) => scores.push(score),
            Err(Error::Diverged(_)) | Err(Error::NonFinite { .. }) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    if scores.is_empty() {
        return Err(Error::Diverged(0));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt(), failures, scores))
}

/// Euclidean projection of a vector onto the probability simplex
/// (Duchi et al. 2008).
fn project_simplex(v: &mut [f64]) {
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    let mut rho = 0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            rho = i + 1;
            theta = t;
        }
    }
    let _ = rho;
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Fully constrained least squares per pixel: minimize ||E^T y - x||_2
/// subject to y >= 0, sum(y) = 1, by projected gradient with a fixed step
/// 1/lambda_max(E E^T) for 500 iterations.
pub fn fcls_baseline(pixels: &[f64], bands: usize, endmembers: &EndmemberMatrix) -> Result<Vec<f64>> {
    if bands != endmembers.bands() || pixels.len() % bands != 0 {
        return Err(Error::Shape(format!(
            "pixel block of {} values with {} bands does not match {}-band endmembers",
            pixels.len(),
            bands,
            endmembers.bands()
        )));
    }
    let k = endmembers.materials();
    let e = endmembers.tensor().data();
    // Gram matrix G = E E^T (K x K)
    let mut gram = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            gram[a * k + b] = (0..bands).map(|d| e[a * bands + d] * e[b * bands + d]).sum();
        }
    }
    // largest eigenvalue by power iteration
    let mut v = vec![1.0 / (k as f64).sqrt(); k];
    let mut lam = 0.0;
    for _ in 0..200 {
        let mut w = vec![0.0; k];
        for a in 0..k {
            for b in 0..k {
                w[a] += gram[a * k + b] * v[b];
            }
        }
        lam = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if lam == 0.0 {
            break;
        }
        for (x, y) in v.iter_mut().zip(&w) {
            *x = y / lam;
        }
    }
    if lam < 1e-12 {
        eprintln!("warning: endmember Gram matrix is numerically rank deficient");
        lam = 1e-12;
    }
    let step = 1.0 / lam;
    let count = pixels.len() / bands;
    let mut out = Vec::with_capacity(count * k);
    for p in 0..count {
        let x = &pixels[p * bands..(p + 1) * bands];
        // E x (K)
        let ex: Vec<f64> = (0..k)
            .map(|a| (0..bands).map(|d| e[a * bands + d] * x[d]).sum())
            .collect();
        let mut y = vec![1.0 / k as f64; k];
        for _ in 0..500 {
            // gradient of 0.5||E^T y - x||^2 = G y - E x
            let mut g = vec![0.0; k];
            for a in 0..k {
                g[a] = (0..k).map(|b| gram[a * k + b] * y[b]).sum::<f64>() - ex[a];
            }
            for a in 0..k {
                y[a] -= step * g[a];
            }
            project_simplex(&mut y);
        }
        out.extend(y);
    }
    Ok(out)
}

/// One 8-bit P5 PGM per material plus a long-format CSV (row, col, material,
/// value). Out-of-range values are clamped; the clamp count is returned.
pub fn export_abundance_maps<P: AsRef<Path>>(
    abundances: &[f64],
    height: usize,
    width: usize,
    materials: usize,
    prefix: P,
) -> Result<usize> {
    if abundances.len() != height * width * materials {
        return Err(Error::Shape(format!(
            "abundance block of {} values does not match {}x{}x{}",
            abundances.len(),
            height,
            width,
            materials
        )));
    }
    let prefix = prefix.as_ref();
    let mut clamped = 0usize;
    let mut clamp = |v: f64| -> f64 {
        if !(0.0..=1.0).contains(&v) {
            clamped += 1;
            v.clamp(0.0, 1.0)
        } else {
            v
        }
    };
    let mut csv = String::from("row,col,material,value\n");
    let mut maps: Vec<Vec<u8>> = vec![Vec::with_capacity(height * width); materials];
    for r in 0..height {
        for c in 0..width {
            for k in 0..materials {
                let v = clamp(abundances[(r * width + c) * materials + k]);
                csv.push_str(&format!("{},{},{},{:.17e}\n", r, c, k, v));
                maps[k].push((v * 255.0).round() as u8);
            }
        }
    }
    for (k, map) in maps.iter().enumerate() {
        let mut bytes = format!("P5\n{} {}\n255\n", width, height).into_bytes();
        bytes.extend_from_slice(map);
        std::fs::write(with_suffix(prefix, &format!("_k{}.pgm", k)), bytes)?;
    }
    std::fs::write(with_suffix(prefix, ".csv"), csv)?;
    if clamped > 0 {
        eprintln!("warning: clamped {} abundance values outside [0,1]", clamped);
    }
    Ok(clamped)
}

fn with_suffix(prefix: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    std::path::PathBuf::from(s)
}

/// Read back a P5 PGM written by `export_abundance_maps` (test/CLI helper).
pub fn read_pgm<P: AsRef<Path>>(path: P) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::Format("pgm header truncated".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Format("pgm header is not ascii".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("P5") {
        return Err(Error::Format("not a P5 pgm".into()));
    }
    let dims: Vec<usize> = lines
        .next()
        .unwrap_or("")
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format("bad pgm dimensions".into())))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::Format("bad pgm dimensions".into()));
    }
    Ok((dims[1], dims[0], bytes[header_end + 1..].to_vec()))
}

/// Project row vectors onto their top-2 principal components. Returns the
/// [B, 2] projection and the two explained variances.
pub fn pca_project(vectors: &[f64], features: usize) -> Result<(Vec<f64>, [f64; 2])> {
    if features == 0 || vectors.len() % features != 0 {
        return Err(Error::Shape("pca input is not [B, F]".into()));
    }
    let b = vectors.len() / features;
    if b <= 2 {
        return Err(Error::Param("pca needs more than 2 samples".into()));
    }
    let mut mean = vec![0.0; features];
    for p in 0..b {
        for f in 0..features {
            mean[f] += vectors[p * features + f];
        }
    }
    for m in &mut mean {
        *m /= b as f64;
    }
    let mut cov = vec![0.0; features * features];
    for p in 0..b {
        for i in 0..features {
            let di = vectors[p * features + i] - mean[i];
            for j in i..features {
                let dj = vectors[p * features + j] - mean[j];
                cov[i * features + j] += di * dj;
            }
        }
    }
    for i in 0..features {
        for j in 0..i {
            cov[i * features + j] = cov[j * features + i];
        }
    }
    for v in &mut cov {
        *v /= b as f64;
    }
    let total_var: f64 = (0..features).map(|i| cov[i * features + i]).sum();
    if total_var < 1e-15 {
        eprintln!("warning: zero-variance data, pca projection is all zeros");
        return Ok((vec![0.0; b * 2], [0.0, 0.0]));
    }
    let mut components = Vec::new();
    let mut eigvals = [0.0f64; 2];
    let mut work = cov.clone();
    for comp in 0..2 {
        // deterministic non-degenerate start, kept orthogonal to earlier
        // components so a zero eigenvalue still yields a valid direction
        let mut v: Vec<f64> = (0..features)
            .map(|f| 1.0 + ((f * (comp + 3) + 1) as f64).sin())
            .collect();
        let orthogonalize = |v: &mut Vec<f64>, components: &Vec<Vec<f64>>| {
            for prev in components {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-18 {
                for x in v.iter_mut() {
                    *x /= n;
                }
            }
        };
        orthogonalize(&mut v, &components);
        let mut lam = 0.0;
        for _ in 0..200 {
            let mut w = vec![0.0; features];
            for i in 0..features {
                for j in 0..features {
                    w[i] += work[i * features + j] * v[j];
                }
            }
            let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-18 {
                lam = 0.0;
                break;
            }
            let mut next = w;
            orthogonalize(&mut next, &components);
            let delta: f64 = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
            v = next;
            lam = n;
            if delta < 1e-9 {
                break;
            }
        }
        eigvals[comp] = lam;
        // deflate: work -= lam v v^T
        for i in 0..features {
            for j in 0..features {
                work[i * features + j] -= lam * v[i] * v[j];
            }
        }
        components.push(v);
    }
    let mut out = vec![0.0; b * 2];
    for p in 0..b {
        for (c, comp) in components.iter().enumerate() {
            out[p * 2 + c] = (0..features)
                .map(|f| (vectors[p * features + f] - mean[f]) * comp[f])
                .sum();
        }
    }
    Ok((out, eigvals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmse_basics() {
        let y = vec![1.0, 0.0, 0.5, 0.5];
        assert_eq!(rmse(&y, &y, 2).unwrap(), 0.0);
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        assert!((rmse(&a, &b, 2).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        // symmetry and linear scaling
        let c = vec![0.3, 0.7, 0.6, 0.4];
        let d = vec![0.5, 0.5, 0.2, 0.8];
        assert_eq!(rmse(&c, &d, 2).unwrap(), rmse(&d, &c, 2).unwrap());
        let c2: Vec<f64> = c.iter().map(|v| v * 3.0).collect();
        let d2: Vec<f64> = d.iter().map(|v| v * 3.0).collect();
        assert!((rmse(&c2, &d2, 2).unwrap() - 3.0 * rmse(&c, &d, 2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn per_material_rmse_combines_to_overall() {
        let t = vec![1.0, 0.0, 0.0, 1.0];
        let e = vec![0.6, 0.4, 0.1, 0.9];
        let per = rmse_per_material(&t, &e, 2).unwrap();
        let overall = rmse(&t, &e, 2).unwrap();
        let recombined = (per.iter().map(|v| v * v).sum::<f64>()).sqrt();
        assert!((overall - recombined).abs() < 1e-12);
    }

    #[test]
    fn repeated_eval_statistics() {
        let (mean, std, failures, scores) = repeated_eval(5, 20, |_| Ok(0.25)).unwrap();
        assert!((mean - 0.25).abs() < 1e-15);
        assert_eq!(std, 0.0);
        assert_eq!(failures, 0);
        assert_eq!(scores.len(), 20);
        let (m, s, _, _) = repeated_eval(5, 1, |seed| Ok(seed as f64)).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(m, derive_seed(5, 0) as f64);
    }

    #[test]
    fn repeated_eval_counts_diverged_runs() {
        let mut call = 0;
        let (_, _, failures, scores) = repeated_eval(1, 4, |_| {
            call += 1;
            if call % 2 == 0 {
                Err(Error::Diverged(10))
            } else {
                Ok(1.0)
            }
        })
        .unwrap();
        assert_eq!(failures, 2);
        assert_eq!(scores.len(), 2);
    }

    #[test]
    fn simplex_projection_properties() {
        let mut v = vec![0.2, 0.3, 0.5];
        project_simplex(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut w = vec![10.0, -5.0, 0.0];
        project_simplex(&mut w);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w[0] - 1.0).abs() < 1e-12);
    }

    fn orthogonal_endmembers() -> EndmemberMatrix {
        EndmemberMatrix::new(
            Tensor::new(vec![2, 4], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn fcls_recovers_pure_pixel() {
        let e = orthogonal_endmembers();
        let x = vec![1.0, 1.0, 0.0, 0.0];
        let y = fcls_baseline(&x, 4, &e).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-4);
        assert!(y[1].abs() < 1e-4);
    }

    #[test]
    fn fcls_recovers_even_mixture() {
        let e = orthogonal_endmembers();
        let x = vec![0.5, 0.5, 0.5, 0.5];
        let y = fcls_baseline(&x, 4, &e).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-4);
        assert!((y[1] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn fcls_outputs_stay_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = crate::data::procedural_endmembers(&mut rng, 4, 30).unwrap();
        let pixels: Vec<f64> = (0..5 * 30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y = fcls_baseline(&pixels, 30, &e).unwrap();
        for p in 0..5 {
            let row = &y[p * 4..(p + 1) * 4];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= -1e-12));
        }
    }

    #[test]
    fn fcls_objective_is_nonincreasing() {
        // rerun the inner loop manually with instrumentation
        let e = orthogonal_endmembers();
        let x = [0.8, 0.8, 0.2, 0.2];
        let k = 2;
        let bands = 4;
        let ed = e.tensor().data();
        let obj = |y: &[f64]| -> f64 {
            (0..bands)
                .map(|d| {
                    let r: f64 = (0..k).map(|a| ed[a * bands + d] * y[a]).sum::<f64>() - x[d];
                    r * r
                })
                .sum()
        };
        let mut gram = vec![0.0; 4];
        for a in 0..2 {
            for b in 0..2 {
                gram[a * 2 + b] = (0..4).map(|d| ed[a * 4 + d] * ed[b * 4 + d]).sum();
            }
        }
        let step = 1.0 / 2.0; // lambda_max of diag(2,2)
        let ex: Vec<f64> = (0..2).map(|a| (0..4).map(|d| ed[a * 4 + d] * x[d]).sum()).collect();
        let mut y = vec![0.5, 0.5];
        let mut prev = obj(&y);
        for _ in 0..50 {
            let g: Vec<f64> = (0..2)
                .map(|a| (0..2).map(|b| gram[a * 2 + b] * y[b]).sum::<f64>() - ex[a])
                .collect();
            for a in 0..2 {
                y[a] -= step * g[a];
            }
            project_simplex(&mut y);
            let cur = obj(&y);
            assert!(cur <= prev + 1e-12);
            prev = cur;
        }
    }

    #[test]
    fn pgm_and_csv_exports_round_trip() {
        let dir = std::env::temp_dir().join(format!("specmix-eval-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let prefix = dir.join("maps");
        let (h, w, k) = (3, 4, 2);
        let values: Vec<f64> = (0..h * w * k).map(|i| (i % 5) as f64 / 4.0).collect();
        let clamped = export_abundance_maps(&values, h, w, k, &prefix).unwrap();
        assert_eq!(clamped, 0);
        let csv = std::fs::read_to_string(dir.join("maps.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + h * w * k);
        let (rh, rw, data) = read_pgm(dir.join("maps_k0.pgm")).unwrap();
        assert_eq!((rh, rw), (h, w));
        for r in 0..h {
            for c in 0..w {
                let expect = (values[(r * w + c) * k] * 255.0).round() as u8;
                assert_eq!(data[r * w + c], expect);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn constant_map_quantizes_to_mid_gray() {
        let dir = std::env::temp_dir().join(format!("specmix-eval2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let prefix = dir.join("half");
        export_abundance_maps(&vec![0.5; 4], 2, 2, 1, &prefix).unwrap();
        let (_, _, data) = read_pgm(dir.join("half_k0.pgm")).unwrap();
        assert!(data.iter().all(|&v| v == 127 || v == 128));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn out_of_range_values_are_clamped_and_counted() {
        let dir = std::env::temp_dir().join(format!("specmix-eval3-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let clamped =
            export_abundance_maps(&[1.2, -0.1, 0.5, 0.5], 2, 1, 2, dir.join("c")).unwrap();
        assert_eq!(clamped, 2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pca_collapses_collinear_points() {
        let mut data = Vec::new();
        for i in 0..10 {
            let t = i as f64;
            data.extend([2.0 * t, -1.0 * t, 0.5 * t]);
        }
        let (proj, eig) = pca_project(&data, 3).unwrap();
        for p in 0..10 {
            assert!(proj[p * 2 + 1].abs() < 1e-6, "second pc should vanish");
        }
        assert!(eig[1] / eig[0].max(1e-30) < 1e-9);
    }

    #[test]
    fn pca_splits_isotropic_variance_roughly_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut data = Vec::new();
        for _ in 0..4000 {
            data.push(rng.sample::<f64, _>(rand_distr::StandardNormal));
            data.push(rng.sample::<f64, _>(rand_distr::StandardNormal));
        }
        let (_, eig) = pca_project(&data, 2).unwrap();
        let ratio = eig[0] / (eig[0] + eig[1]);
        assert!(
            (0.4..=0.6).contains(&ratio),
            "explained-variance split {} outside 50% +/- 10%",
            ratio
        );
    }

    #[test]
    fn pca_handles_zero_variance() {
        let data = vec![1.0; 30];
        let (proj, eig) = pca_project(&data, 3).unwrap();
        assert!(proj.iter().all(|&v| v == 0.0));
        assert_eq!(eig, [0.0, 0.0]);
    }
}
