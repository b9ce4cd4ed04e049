//! Command-line surface for the unmixing engine.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use specmix::data::{
    band_preset, load_cube, load_endmembers, preprocess, remove_bands, save_cube, save_endmembers,
    synthesize_scene, SceneParams, SpectralCube,
};
use specmix::error::{Error, Result};
use specmix::eval::{
    export_abundance_maps, fcls_baseline, pca_project, repeated_eval, rmse, rmse_per_material,
    EvalReport,
};
use specmix::model::UnmixModel;
use specmix::train::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "specmix", about = "Blind hyperspectral unmixing engine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (cube, ground-truth abundances, endmembers)
    SynthGen(SynthGenArgs),
    /// Train a model on a cube with known endmember spectra
    Train(TrainArgs),
    /// Evaluate a trained model (or retrain repeatedly) against ground truth
    Evaluate(EvaluateArgs),
    /// Constrained least-squares abundance baseline
    Baseline(BaselineArgs),
    /// Export abundance maps as PGM images + CSV, or PCA projections
    Export(ExportArgs),
}

#[derive(Args)]
struct SynthGenArgs {
    /// Scene-parameter JSON file (SceneParams fields)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Output directory (cube.hsc, abundances.hsc, endmembers.csv)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    materials: Option<usize>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    blob_count: Option<usize>,
    #[arg(long)]
    blob_sigma: Option<f64>,
    #[arg(long)]
    blob_peak: Option<f64>,
    /// Noise SNR in dB; negative disables noise
    #[arg(long)]
    snr: Option<f64>,
    /// Endmember CSV overriding the procedural library
    #[arg(long)]
    endmembers: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CommonTrainArgs {
    /// TrainConfig JSON file; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda_pq: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    materials: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    noise_dim: Option<usize>,
    /// Feed raw spectra into the mixture kernel (ablate the extractor)
    #[arg(long)]
    no_encoder: bool,
    /// Band-removal preset applied to the cube: urban | jasper | none
    #[arg(long, default_value = "none")]
    bands: String,
}

impl CommonTrainArgs {
    fn build_config(&self, seed: u64) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?,
            None => TrainConfig::default(),
        };
        cfg.seed = seed;
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.lambda0 {
            cfg.lambda0 = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.lambda2 = v;
        }
        if let Some(v) = self.lambda_pq {
            cfg.lambda_pq = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.materials {
            cfg.materials = v;
        }
        if let Some(v) = self.components {
            cfg.components = v;
        }
        if let Some(v) = self.latent_dim {
            cfg.latent_dim = v;
        }
        if let Some(v) = self.noise_dim {
            cfg.noise_dim = Some(v);
        }
        if self.no_encoder {
            cfg.use_encoder = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn load_prepared_cube(&self, path: &PathBuf) -> Result<SpectralCube> {
        let cube = load_cube(path)?;
        let removal = band_preset(&self.bands)?;
        remove_bands(&cube, &removal)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    endmembers: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Run directory (config.json, history.csv, checkpoints, model.bin)
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonTrainArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained model file; omit to retrain from scratch per run
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    cube: PathBuf,
    /// Ground-truth abundance cube (H x W x K)
    #[arg(long)]
    truth: PathBuf,
    /// Needed when retraining (no --model)
    #[arg(long)]
    endmembers: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON output path
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonTrainArgs,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    endmembers: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Report JSON output path
    #[arg(long)]
    out: PathBuf,
    /// Band-removal preset: urban | jasper | none
    #[arg(long, default_value = "none")]
    bands: String,
}

#[derive(Args)]
struct ExportArgs {
    /// Abundance cube (H x W x K) to render as PGM maps + CSV
    #[arg(long)]
    abundances: Option<PathBuf>,
    /// Output path prefix for the maps
    #[arg(long)]
    maps_prefix: Option<PathBuf>,
    /// Cube whose pixels are PCA-projected to 2-D
    #[arg(long)]
    pca_cube: Option<PathBuf>,
    /// CSV output for the PCA projection
    #[arg(long)]
    pca_out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Baseline(a) => run_baseline(a),
        Command::Export(a) => run_export(a),
    };
    if let Err(e) = outcome {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}

fn synth_gen(a: SynthGenArgs) -> Result<()> {
    let mut params: SceneParams = match &a.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?,
        None => SceneParams::default(),
    };
    if let Some(v) = a.height {
        params.height = v;
    }
    if let Some(v) = a.width {
        params.width = v;
    }
    if let Some(v) = a.materials {
        params.materials = v;
    }
    if let Some(v) = a.bands {
        params.bands = v;
    }
    if let Some(v) = a.blob_count {
        params.blob_count = v;
    }
    if let Some(v) = a.blob_sigma {
        params.blob_sigma = v;
    }
    if let Some(v) = a.blob_peak {
        params.blob_peak = v;
    }
    if let Some(v) = a.snr {
        params.noise_snr_db = if v < 0.0 { None } else { Some(v) };
    }
    let library = match &a.endmembers {
        Some(p) => Some(load_endmembers(p)?),
        None => None,
    };
    let (cube, gt) = synthesize_scene(a.seed, &params, library)?;
    std::fs::create_dir_all(&a.out)?;
    save_cube(&cube, a.out.join("cube.hsc"))?;
    save_cube(&gt.abundance_cube()?, a.out.join("abundances.hsc"))?;
    save_endmembers(&gt.endmembers, a.out.join("endmembers.csv"))?;
    println!(
        "wrote {}x{}x{} scene with {} materials to {}",
        cube.height,
        cube.width,
        cube.bands,
        gt.materials,
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = a.common.build_config(a.seed)?;
    let cube = a.common.load_prepared_cube(&a.cube)?;
    let endmembers = load_endmembers(&a.endmembers)?;
    let pixels = preprocess(&cube)?;
    if pixels.skipped_zero > 0 {
        eprintln!("skipped {} all-zero pixels", pixels.skipped_zero);
    }
    let started = Instant::now();
    let (model, history) = train(&pixels, &endmembers, &cfg, Some(&a.out))?;
    model.save(a.out.join("model.bin"))?;
    let last = history.last();
    println!(
        "trained {} iterations in {:.1}s; final L_re {:.6}, L_adv {:.6}",
        history.len(),
        started.elapsed().as_secs_f64(),
        last.map(|r| r.l_re).unwrap_or(f64::NAN),
        last.map(|r| r.l_adv).unwrap_or(f64::NAN),
    );
    Ok(())
}

fn load_truth(path: &PathBuf, cube: &SpectralCube) -> Result<SpectralCube> {
    let truth = load_cube(path)?;
    if truth.height != cube.height || truth.width != cube.width {
        return Err(Error::Shape(format!(
            "truth raster is {}x{}, cube is {}x{}",
            truth.height, truth.width, cube.height, cube.width
        )));
    }
    Ok(truth)
}

fn evaluate_model(
    model: &mut UnmixModel,
    cube: &SpectralCube,
    truth: &SpectralCube,
) -> Result<(f64, Vec<f64>, Option<(f64, f64)>)> {
    let predicted = model.predict_scene(cube, 256)?;
    let overall = rmse(&truth.data, &predicted, truth.bands)?;
    let per = rmse_per_material(&truth.data, &predicted, truth.bands)?;
    let pixels = preprocess(cube)?;
    let active = model.active_response(&pixels, 64)?;
    Ok((overall, per, active))
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let cube = a.common.load_prepared_cube(&a.cube)?;
    let truth = load_truth(&a.truth, &cube)?;
    let started = Instant::now();
    let report = match &a.model {
        Some(path) => {
            let mut model = UnmixModel::load(path)?;
            let (overall, per, active) = evaluate_model(&mut model, &cube, &truth)?;
            EvalReport {
                overall_rmse: overall,
                per_material_rmse: per,
                mean_rmse: overall,
                std_rmse: 0.0,
                runs: 1,
                failed_runs: 0,
                active_response_percent: active.map(|(pre, _)| pre),
                active_response_post_percent: active.map(|(_, post)| post),
                active_pre_exceeds_post: active.map(|(pre, post)| pre > post),
                runtime_seconds: started.elapsed().as_secs_f64(),
            }
        }
        None => {
            let endmember_path = a.endmembers.as_ref().ok_or_else(|| {
                Error::Config("evaluate without --model needs --endmembers to retrain".into())
            })?;
            let endmembers = load_endmembers(endmember_path)?;
            let cfg_base = a.common.build_config(a.seed)?;
            let pixels = preprocess(&cube)?;
            let mut last_detail: Option<(f64, Vec<f64>, Option<(f64, f64)>)> = None;
            let (mean, std, failures, _) = repeated_eval(a.seed, a.runs, |seed| {
                let mut cfg = cfg_base.clone();
                cfg.seed = seed;
                let (mut model, _) = train(&pixels, &endmembers, &cfg, None)?;
                let detail = evaluate_model(&mut model, &cube, &truth)?;
                let overall = detail.0;
                last_detail = Some(detail);
                Ok(overall)
            })?;
            let (overall, per, active) = last_detail.expect("at least one successful run");
            EvalReport {
                overall_rmse: overall,
                per_material_rmse: per,
                mean_rmse: mean,
                std_rmse: std,
                runs: a.runs,
                failed_runs: failures,
                active_response_percent: active.map(|(pre, _)| pre),
                active_response_post_percent: active.map(|(_, post)| post),
                active_pre_exceeds_post: active.map(|(pre, post)| pre > post),
                runtime_seconds: started.elapsed().as_secs_f64(),
            }
        }
    };
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "rmse {:.6} (mean {:.6} +/- {:.6} over {} runs, {} failed)",
        report.overall_rmse, report.mean_rmse, report.std_rmse, report.runs, report.failed_runs
    );
    Ok(())
}

fn run_baseline(a: BaselineArgs) -> Result<()> {
    let cube = load_cube(&a.cube)?;
    let removal = band_preset(&a.bands)?;
    let cube = remove_bands(&cube, &removal)?;
    let endmembers = load_endmembers(&a.endmembers)?;
    if endmembers.bands() != cube.bands {
        return Err(Error::Shape(format!(
            "endmembers span {} bands, cube has {}",
            endmembers.bands(),
            cube.bands
        )));
    }
    let started = Instant::now();
    let estimates = fcls_baseline(&cube.data, cube.bands, &endmembers)?;
    let k = endmembers.materials();
    match &a.truth {
        Some(path) => {
            let truth = load_truth(path, &cube)?;
            let overall = rmse(&truth.data, &estimates, k)?;
            let per = rmse_per_material(&truth.data, &estimates, k)?;
            let report = EvalReport {
                overall_rmse: overall,
                per_material_rmse: per,
                mean_rmse: overall,
                std_rmse: 0.0,
                runs: 1,
                failed_runs: 0,
                active_response_percent: None,
                active_response_post_percent: None,
                active_pre_exceeds_post: None,
                runtime_seconds: started.elapsed().as_secs_f64(),
            };
            std::fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n")?;
            println!("baseline rmse {:.6}", overall);
        }
        None => {
            let est = SpectralCube::new(cube.height, cube.width, k, estimates)?;
            save_cube(&est, &a.out)?;
            println!("wrote baseline abundances to {}", a.out.display());
        }
    }
    Ok(())
}

fn run_export(a: ExportArgs) -> Result<()> {
    let mut did_anything = false;
    if let (Some(ab), Some(prefix)) = (&a.abundances, &a.maps_prefix) {
        let cube = load_cube(ab)?;
        let clamped =
            export_abundance_maps(&cube.data, cube.height, cube.width, cube.bands, prefix)?;
        println!(
            "wrote {} maps (prefix {}), {} values clamped",
            cube.bands,
            prefix.display(),
            clamped
        );
        did_anything = true;
    }
    if let (Some(cube_path), Some(out)) = (&a.pca_cube, &a.pca_out) {
        let cube = load_cube(cube_path)?;
        let (proj, eig) = pca_project(&cube.data, cube.bands)?;
        let mut csv = String::from("pc1,pc2\n");
        for p in 0..proj.len() / 2 {
            csv.push_str(&format!("{:.17e},{:.17e}\n", proj[p * 2], proj[p * 2 + 1]));
        }
        std::fs::write(out, csv)?;
        println!(
            "wrote PCA projection to {} (explained variances {:.4e}, {:.4e})",
            out.display(),
            eig[0],
            eig[1]
        );
        did_anything = true;
    }
    if !did_anything {
        return Err(Error::Config(
            "export needs --abundances with --maps-prefix and/or --pca-cube with --pca-out".into(),
        ));
    }
    Ok(())
}
