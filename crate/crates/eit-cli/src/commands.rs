//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use eit_core::dataset::{
    derive_seed, generate_dataset, DatasetConfig, Distribution, EitDataset,
};
use eit_core::fem::{Conductivity, D2NMatrix, FemContext};
use eit_core::inverse::{lbfgs_reconstruct, reconstruction_operator, InverseProblem};
use eit_core::mesh::build_disk_mesh;
use eit_core::phantom::SheppLoganPerturbation;
use eit_core::raster::ImageGrid;
use eit_nn::checkpoint::{load_ddpm, load_resnet, save_ddpm, save_resnet};
use eit_nn::ddpm::LossWeighting;
use eit_nn::optim::LrSchedule;
use eit_nn::resnet::{InputMode, ResNetConfig};
use eit_nn::train::{
    raw_condition, train_ddpm, train_resnet, DdpmTrainOptions, TrainOptions,
};
use eit_nn::unet::UnetConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::common::{
    dataset_hash, evaluate_predictions, fem_context_for, hash_string, load_predictions,
    run_method, save_predictions, write_png, write_report, ConfigError, Method, MethodContext,
    MissingArtifact, PredictionSidecar, ReportFile,
};

// ---------------------------------------------------------------------------
// mesh
// ---------------------------------------------------------------------------

pub fn cmd_mesh(rings: usize, boundary: usize, out: &Path) -> anyhow::Result<()> {
    let mesh = build_disk_mesh(rings, boundary)?;
    mesh.save_json(out)?;
    println!(
        "mesh: {} nodes, {} elements, {} boundary nodes -> {}",
        mesh.n_nodes(),
        mesh.n_elements(),
        mesh.n_boundary(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cmd_generate(
    distribution: &str,
    count: usize,
    iters: usize,
    noise: f64,
    seed: u64,
    mesh_rings: usize,
    mesh_boundary: usize,
    image_size: usize,
    out: &Path,
    previews: usize,
) -> anyhow::Result<()> {
    let config = DatasetConfig {
        distribution: distribution.parse::<Distribution>()?,
        n_samples: count,
        k_iters: iters,
        noise_level: noise,
        seed,
        mesh_rings,
        mesh_boundary,
        image_size,
        shepp_logan_perturbation: SheppLoganPerturbation::default(),
    };
    let meta = generate_dataset(&config, out)?;
    println!(
        "dataset: {} samples ({} train / {} val / {} test), mesh {} elements, hash {}",
        count,
        count * 80 / 100,
        count * 2 / 100,
        count - count * 80 / 100 - count * 2 / 100,
        meta.n_elements,
        dataset_hash(out)?
    );
    if previews > 0 {
        let ds = EitDataset::load(out)?;
        let dir = out.join("previews");
        std::fs::create_dir_all(&dir)?;
        let n = ds.image_size();
        for i in 0..previews.min(ds.len()) {
            for (name, data) in [("true", ds.sigma_true(i)), ("hat", ds.sigma_hat(i))] {
                let img = ImageGrid::from_flat(n, data.to_vec())?;
                let lo = img.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = img.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                write_png(
                    &dir.join(format!("sample_{i:04}_{name}.png")),
                    &img,
                    lo,
                    hi.max(lo + 1e-9),
                )?;
            }
        }
        println!("previews: {} pairs -> {}", previews.min(ds.len()), dir.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ReconstructionSidecar {
    n_elements: usize,
    mesh_rings: usize,
    mesh_boundary: usize,
    iters: usize,
    lambda: f64,
    grad_tol: f64,
    final_misfit: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_reconstruct(
    measurement: &Path,
    iters: usize,
    lambda: f64,
    grad_tol: f64,
    mesh_rings: usize,
    mesh_boundary: usize,
    out: &Path,
    trace: Option<&Path>,
) -> anyhow::Result<()> {
    if !measurement.exists() {
        bail!(MissingArtifact(format!("{}", measurement.display())));
    }
    let (m_obs, sidecar) = D2NMatrix::load_blob(measurement)?;
    let mesh = build_disk_mesh(mesh_rings, mesh_boundary)?;
    if mesh.n_boundary() != sidecar.n_b {
        bail!(ConfigError(format!(
            "measurement has {} boundary nodes, mesh ({mesh_rings},{mesh_boundary}) has {}",
            sidecar.n_b,
            mesh.n_boundary()
        )));
    }
    let ctx = FemContext::new(mesh.clone());
    let result = if lambda == 0.0 {
        reconstruction_operator(ctx, &m_obs, iters)?.1
    } else {
        let problem = InverseProblem::from_context(ctx, m_obs, lambda)?;
        let init = Conductivity::constant(mesh.n_elements(), 1.0)?;
        lbfgs_reconstruct(&problem, init, iters, 10, grad_tol)?
    };
    eit_core::blob::write_f64_file(out, &result.x)?;
    let meta = ReconstructionSidecar {
        n_elements: mesh.n_elements(),
        mesh_rings,
        mesh_boundary,
        iters,
        lambda,
        grad_tol,
        final_misfit: result.value,
    };
    let f = std::fs::File::create(out.with_extension("json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &meta)?;
    if let Some(trace_path) = trace {
        eit_core::inverse::write_trace_csv(trace_path, &result)?;
    }
    println!(
        "reconstruction: {} iterations, misfit {:.3e} -> {}",
        result.iterations(),
        result.value,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Architecture defaults live here; a JSON config file with the same fields
/// overrides them, and CLI flags override the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFileConfig {
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub n_down_blocks: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub t_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_period: usize,
    pub weighting: LossWeighting,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        TrainFileConfig {
            base_channels: 16,
            n_res_blocks: 8,
            n_down_blocks: 2,
            channel_mults: vec![1, 2, 2],
            blocks_per_level: 1,
            time_embed_dim: 64,
            t_steps: 400,
            epochs: 2000,
            batch_size: 128,
            learning_rate: 1e-3,
            min_learning_rate: 1e-6,
            lr_decay_factor: 0.75,
            lr_decay_period: 500,
            weighting: LossWeighting::Simple,
        }
    }
}

fn parse_mode(mode: &str) -> anyhow::Result<InputMode> {
    match mode {
        "corrector" => Ok(InputMode::InitialGuess),
        "direct" => Ok(InputMode::DirectMeasurement),
        other => bail!(ConfigError(format!(
            "unknown mode '{other}' (expected corrector or direct)"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    model: &str,
    dataset: &Path,
    mode: &str,
    config_file: Option<&Path>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: u64,
    out: &Path,
    curves: Option<&Path>,
) -> anyhow::Result<()> {
    let ds = EitDataset::load(dataset)?;
    let input_mode = parse_mode(mode)?;
    let mut cfg = match config_file {
        Some(path) => {
            let f = std::fs::File::open(path)
                .with_context(|| format!("config {}", path.display()))?;
            serde_json::from_reader::<_, TrainFileConfig>(std::io::BufReader::new(f))?
        }
        None => TrainFileConfig::default(),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }

    match model {
        "resnet" => {
            let arch = ResNetConfig {
                image_size: ds.image_size(),
                base_channels: cfg.base_channels,
                n_res_blocks: cfg.n_res_blocks,
                n_down_blocks: cfg.n_down_blocks,
                input_mode,
            };
            let opts = TrainOptions {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                seed,
                lr: LrSchedule::StepDecay {
                    base: cfg.learning_rate,
                    factor: cfg.lr_decay_factor,
                    period: cfg.lr_decay_period,
                },
            };
            let (trained, log) = train_resnet(&ds, arch, &opts)?;
            save_resnet(out, &trained)?;
            if let Some(c) = curves {
                log.write_csv(c)?;
            }
            println!(
                "resnet ({} params): best val {:.4e} at epoch {} -> {}",
                trained.model.param_count(),
                log.best_val,
                log.best_epoch,
                out.display()
            );
        }
        "ddpm" => {
            let arch = UnetConfig {
                image_size: ds.image_size(),
                in_channels: 2,
                base_channels: cfg.base_channels,
                channel_mults: cfg.channel_mults.clone(),
                blocks_per_level: cfg.blocks_per_level,
                time_embed_dim: cfg.time_embed_dim,
            };
            let opts = DdpmTrainOptions {
                base: TrainOptions {
                    epochs: cfg.epochs,
                    batch_size: cfg.batch_size,
                    seed,
                    lr: LrSchedule::Cosine {
                        base: cfg.learning_rate,
                        min: cfg.min_learning_rate,
                        total: cfg.epochs,
                    },
                },
                t_steps: cfg.t_steps,
                beta_range: None,
                weighting: cfg.weighting,
            };
            let (trained, log) = train_ddpm(&ds, arch, &opts, input_mode)?;
            save_ddpm(out, &trained)?;
            if let Some(c) = curves {
                log.write_csv(c)?;
            }
            println!(
                "ddpm ({} params, T={}): best val {:.4e} at epoch {} -> {}",
                trained.model.param_count(),
                trained.schedule.len(),
                log.best_val,
                log.best_epoch,
                out.display()
            );
        }
        other => bail!(ConfigError(format!(
            "unknown model '{other}' (expected resnet or ddpm)"
        ))),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    checkpoint: &Path,
    dataset: &Path,
    index: usize,
    n_samples: usize,
    seed: u64,
    out_prefix: &Path,
    png: bool,
) -> anyhow::Result<()> {
    if !checkpoint.exists() {
        bail!(MissingArtifact(format!("{}", checkpoint.display())));
    }
    let trained = load_ddpm(checkpoint)?;
    let ds = EitDataset::load(dataset)?;
    if index >= ds.len() {
        bail!(ConfigError(format!(
            "sample index {index} out of range (dataset has {})",
            ds.len()
        )));
    }
    let n = ds.image_size();
    let cond = raw_condition(&ds, index, trained.conditioning)?;

    // Individual samples (no averaging) followed by the posterior mean.
    let seeds: Vec<u64> = (0..n_samples)
        .map(|i| derive_seed(seed, i as u64))
        .collect();
    let mut cond_batch = Vec::with_capacity(n_samples * n * n);
    for _ in 0..n_samples {
        cond_batch.extend_from_slice(cond.data());
    }
    let cond_b = eit_nn::tensor::Tensor::from_vec(&[n_samples, 1, n, n], cond_batch)?;
    let samples = trained.sample(&cond_b, &seeds)?;
    let mean = trained.posterior_mean(&cond, n_samples, seed)?;

    eit_core::blob::write_f64_file(
        &out_prefix.with_extension("samples.f64"),
        samples.data(),
    )?;
    eit_core::blob::write_f64_file(&out_prefix.with_extension("mean.f64"), mean.data())?;
    let truth = ds.sigma_true(index);
    let sidecar = json!({
        "index": index,
        "n_samples": n_samples,
        "seed": seed,
        "image_size": n,
        "conditioning": format!("{:?}", trained.conditioning),
    });
    let f = std::fs::File::create(out_prefix.with_extension("json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &sidecar)?;

    if png {
        let lo = truth.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = truth.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
        for i in 0..n_samples {
            let img = ImageGrid::from_flat(
                n,
                samples.data()[i * n * n..(i + 1) * n * n].to_vec(),
            )?;
            write_png(&out_prefix.with_extension(format!("s{i}.png")), &img, lo, hi)?;
        }
        let mean_img = ImageGrid::from_flat(n, mean.data().to_vec())?;
        write_png(&out_prefix.with_extension("mean.png"), &mean_img, lo, hi)?;
    }
    println!(
        "{} posterior samples + mean for test index {index} -> {}.*",
        n_samples,
        out_prefix.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    dataset: &Path,
    method: Option<&str>,
    predictions: Option<&Path>,
    resnet_ckpt: Option<&Path>,
    ddpm_ckpt: Option<&Path>,
    baseline_iters: usize,
    posterior_samples: usize,
    seed: u64,
    out: &Path,
    csv: Option<&Path>,
    predictions_out: Option<&Path>,
) -> anyhow::Result<()> {
    let ds = EitDataset::load(dataset)?;
    let fem = fem_context_for(&ds)?;
    let ds_hash = dataset_hash(dataset)?;

    let (report, resolved) = match (method, predictions) {
        (Some(name), None) => {
            let method = Method::parse(name)?;
            let resnet = resnet_ckpt.map(load_resnet).transpose()?;
            let ddpm = ddpm_ckpt.map(load_ddpm).transpose()?;
            let ctxm = MethodContext {
                dataset: &ds,
                fem: &fem,
                baseline_iters,
                posterior_samples,
                sample_seed: seed,
                resnet: resnet.as_ref(),
                ddpm: ddpm.as_ref(),
            };
            let (preds, report, lambda) = run_method(&ctxm, method)?;
            if let Some(pdir) = predictions_out {
                save_predictions(
                    pdir,
                    method,
                    &preds,
                    &PredictionSidecar {
                        method: method.name().into(),
                        image_size: ds.image_size(),
                        test_indices: ds.splits.test.clone(),
                        dataset_hash: ds_hash.clone(),
                    },
                )?;
            }
            let resolved = json!({
                "method": method.name(),
                "baseline_iters": baseline_iters,
                "posterior_samples": posterior_samples,
                "seed": seed,
                "lambda": lambda,
                "dataset": dataset.display().to_string(),
            });
            (report, resolved)
        }
        (None, Some(pdir)) => {
            let name = out
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("predictions");
            // Evaluate every prediction set found in the directory if the
            // stem does not name one specifically.
            let (preds, sidecar) = load_predictions(pdir, name).or_else(|_| {
                let entries: Vec<String> = std::fs::read_dir(pdir)?
                    .filter_map(|e| e.ok())
                    .filter_map(|e| {
                        e.file_name()
                            .to_str()
                            .and_then(|n| n.strip_suffix(".pred.json").map(String::from))
                    })
                    .collect();
                match entries.as_slice() {
                    [single] => load_predictions(pdir, single),
                    [] => bail!(MissingArtifact(format!(
                        "no predictions in {}",
                        pdir.display()
                    ))),
                    many => bail!(ConfigError(format!(
                        "multiple prediction sets in {} ({}); name the report file after one",
                        pdir.display(),
                        many.join(", ")
                    ))),
                }
            })?;
            if sidecar.dataset_hash != ds_hash {
                bail!(ConfigError(
                    "predictions were computed from a different dataset".into()
                ));
            }
            let report = evaluate_predictions(&ds, &fem, &sidecar.method, &preds)?;
            let resolved = json!({
                "method": sidecar.method,
                "predictions": pdir.display().to_string(),
                "dataset": dataset.display().to_string(),
            });
            (report, resolved)
        }
        _ => bail!(ConfigError(
            "pass exactly one of --method or --predictions".into()
        )),
    };

    let config_hash = hash_string(&resolved.to_string());
    let file = ReportFile {
        report,
        dataset_hash: ds_hash,
        config_hash,
        resolved_config: resolved,
    };
    write_report(out, &file)?;
    if let Some(csv_path) = csv {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
        writeln!(w, "{}", eit_core::metrics::EvalReport::CSV_HEADER)?;
        writeln!(w, "{}", file.report.csv_row())?;
    }
    println!(
        "{}: rel_l2 {:.3e}+-{:.1e}  rel_l1 {:.4}+-{:.4}  psnr {:.2}+-{:.2}  ssim {:.4}+-{:.4}",
        file.report.method,
        file.report.rel_l2_measurement.mean,
        file.report.rel_l2_measurement.std,
        file.report.rel_l1_solution.mean,
        file.report.rel_l1_solution.std,
        file.report.psnr.mean,
        file.report.psnr.std,
        file.report.ssim.mean,
        file.report.ssim.std,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// timing
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct TimingReport {
    lbfgs_k_seconds: Vec<(usize, f64)>,
    lbfgs_fit_r2: f64,
    lbfgs_fit_slope_per_iter: f64,
    lbfgs2500_seconds: f64,
    resnet_forward_seconds: Option<f64>,
    ddpm_posterior_seconds: Option<f64>,
    lbfgsk_resnet_seconds: Option<f64>,
    lbfgsk_ddpm_seconds: Option<f64>,
    method_k: usize,
    posterior_samples: usize,
}

fn linear_fit_r2(points: &[(usize, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|(k, _)| *k as f64).sum();
    let sy: f64 = points.iter().map(|(_, t)| *t).sum();
    let sxx: f64 = points.iter().map(|(k, _)| (*k as f64) * (*k as f64)).sum();
    let sxy: f64 = points.iter().map(|(k, t)| (*k as f64) * t).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let ss_tot: f64 = points.iter().map(|(_, t)| (t - mean_y) * (t - mean_y)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|(k, t)| {
            let p = slope * *k as f64 + intercept;
            (t - p) * (t - p)
        })
        .sum();
    (slope, 1.0 - ss_res / ss_tot.max(1e-300))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_timing(
    dataset: &Path,
    resnet_ckpt: Option<&Path>,
    ddpm_ckpt: Option<&Path>,
    method_k: usize,
    baseline_iters: usize,
    posterior_samples: usize,
    out: &Path,
) -> anyhow::Result<()> {
    let ds = EitDataset::load(dataset)?;
    let fem = fem_context_for(&ds)?;
    let test_idx = *ds
        .splits
        .test
        .first()
        .ok_or_else(|| ConfigError("empty test split".into()))?;
    let m_obs = ds.measurement_matrix(test_idx)?;

    let time_recon = |iters: usize| -> anyhow::Result<f64> {
        let t0 = Instant::now();
        let _ = reconstruction_operator(FemContext::new(fem.mesh().clone()), &m_obs, iters)?;
        Ok(t0.elapsed().as_secs_f64())
    };

    // Warm-up to populate allocator and caches off the clock.
    let _ = time_recon(5)?;

    let mut lbfgs_k_seconds = Vec::new();
    for k in [50usize, 100, 200, 400] {
        lbfgs_k_seconds.push((k, time_recon(k)?));
    }
    let (slope, r2) = linear_fit_r2(&lbfgs_k_seconds);
    let lbfgs2500_seconds = time_recon(baseline_iters)?;
    let t_method_k = time_recon(method_k)?;

    let resnet_forward_seconds = match resnet_ckpt {
        Some(path) => {
            let trained = load_resnet(path)?;
            let cond = raw_condition(&ds, test_idx, trained.model.config.input_mode)?;
            let _ = trained.correct(&cond)?; // warm-up
            let t0 = Instant::now();
            let _ = trained.correct(&cond)?;
            Some(t0.elapsed().as_secs_f64())
        }
        None => None,
    };
    let ddpm_posterior_seconds = match ddpm_ckpt {
        Some(path) => {
            let trained = load_ddpm(path)?;
            let cond = raw_condition(&ds, test_idx, trained.conditioning)?;
            let t0 = Instant::now();
            let _ = trained.posterior_mean(&cond, posterior_samples, 7)?;
            Some(t0.elapsed().as_secs_f64())
        }
        None => None,
    };

    let report = TimingReport {
        lbfgs_fit_r2: r2,
        lbfgs_fit_slope_per_iter: slope,
        lbfgs_k_seconds,
        lbfgs2500_seconds,
        resnet_forward_seconds,
        ddpm_posterior_seconds,
        lbfgsk_resnet_seconds: resnet_forward_seconds.map(|t| t + t_method_k),
        lbfgsk_ddpm_seconds: ddpm_posterior_seconds.map(|t| t + t_method_k),
        method_k,
        posterior_samples,
    };
    let f = std::fs::File::create(out)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &report)?;
    println!("timing (seconds, single sample):");
    for (k, t) in &report.lbfgs_k_seconds {
        println!("  lbfgs K={k:<4} {t:.3}");
    }
    println!("  lbfgs{baseline_iters}   {:.3}", report.lbfgs2500_seconds);
    if let Some(t) = report.resnet_forward_seconds {
        println!("  resnet      {t:.4}");
    }
    if let Some(t) = report.ddpm_posterior_seconds {
        println!("  ddpm x{}   {t:.3}", report.posterior_samples);
    }
    if let Some(t) = report.lbfgsk_resnet_seconds {
        println!("  lbfgsK+resnet {t:.3}");
    }
    if let Some(t) = report.lbfgsk_ddpm_seconds {
        println!("  lbfgsK+ddpm   {t:.3}");
    }
    println!("  linearity fit: slope {slope:.5} s/iter, R^2 {r2:.4}");
    Ok(())
}

// ---------------------------------------------------------------------------
// figures
// ---------------------------------------------------------------------------

pub fn cmd_figures(
    dataset: &Path,
    predictions: &Path,
    out: &Path,
    n_rows: usize,
    ddpm_ckpt: Option<&Path>,
    variability_samples: usize,
) -> anyhow::Result<()> {
    let ds = EitDataset::load(dataset)?;
    let n = ds.image_size();

    // Collect available prediction sets in canonical column order.
    let mut columns: Vec<(String, Vec<ImageGrid>)> = Vec::new();
    for method in Method::ALL {
        if predictions.join(format!("{}.pred.json", method.name())).exists() {
            let (preds, _) = load_predictions(predictions, method.name())?;
            columns.push((method.name().to_string(), preds));
        }
    }
    if columns.is_empty() {
        bail!(MissingArtifact(format!(
            "no prediction sets in {}",
            predictions.display()
        )));
    }
    std::fs::create_dir_all(out)?;

    let rows = n_rows.min(ds.splits.test.len());
    let cols = columns.len() + 1;
    let gap = 2usize;
    let width = cols * n + (cols - 1) * gap;
    let height = rows * n + (rows - 1) * gap;
    let mut canvas = image::GrayImage::from_pixel(width as u32, height as u32, image::Luma([255]));

    for row in 0..rows {
        let test_pos = row;
        let sample_idx = ds.splits.test[test_pos];
        let truth = ImageGrid::from_flat(n, ds.sigma_true(sample_idx).to_vec())?;
        let lo = truth.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = truth
            .pixels()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            .max(lo + 1e-9);
        let mut panels: Vec<&ImageGrid> = vec![&truth];
        for (_, preds) in &columns {
            panels.push(&preds[test_pos]);
        }
        for (col, panel) in panels.iter().enumerate() {
            let x0 = col * (n + gap);
            let y0 = row * (n + gap);
            for r in 0..n {
                for c in 0..n {
                    let v = panel.pixels()[[r, c]];
                    let g = (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8;
                    canvas.put_pixel(
                        (x0 + c) as u32,
                        (y0 + n - 1 - r) as u32,
                        image::Luma([g]),
                    );
                }
            }
        }
    }
    let grid_path = out.join("comparison_grid.png");
    canvas.save(&grid_path)?;
    let names: Vec<&str> = std::iter::once("truth")
        .chain(columns.iter().map(|(n, _)| n.as_str()))
        .collect();
    std::fs::write(out.join("comparison_grid.txt"), names.join(","))?;
    println!(
        "comparison grid ({} rows x {} columns: {}) -> {}",
        rows,
        cols,
        names.join(", "),
        grid_path.display()
    );

    // Individual-sample variability panel, no averaging.
    if let Some(ckpt) = ddpm_ckpt {
        let trained = load_ddpm(ckpt)?;
        let sample_idx = ds.splits.test[0];
        let cond = raw_condition(&ds, sample_idx, trained.conditioning)?;
        let seeds: Vec<u64> = (0..variability_samples)
            .map(|i| derive_seed(4242, i as u64))
            .collect();
        let mut cond_batch = Vec::new();
        for _ in 0..variability_samples {
            cond_batch.extend_from_slice(cond.data());
        }
        let cond_b =
            eit_nn::tensor::Tensor::from_vec(&[variability_samples, 1, n, n], cond_batch)?;
        let samples = trained.sample(&cond_b, &seeds)?;
        let truth = ImageGrid::from_flat(n, ds.sigma_true(sample_idx).to_vec())?;
        let lo = truth.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = truth
            .pixels()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            .max(lo + 1e-9);
        let cols = variability_samples + 1;
        let width = cols * n + (cols - 1) * gap;
        let mut panel =
            image::GrayImage::from_pixel(width as u32, n as u32, image::Luma([255]));
        let mut draw = |col: usize, img: &ImageGrid| {
            let x0 = col * (n + gap);
            for r in 0..n {
                for c in 0..n {
                    let v = img.pixels()[[r, c]];
                    let g = (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8;
                    panel.put_pixel((x0 + c) as u32, (n - 1 - r) as u32, image::Luma([g]));
                }
            }
        };
        draw(0, &truth);
        for i in 0..variability_samples {
            let img = ImageGrid::from_flat(n, samples.data()[i * n * n..(i + 1) * n * n].to_vec())?;
            draw(i + 1, &img);
        }
        let var_path = out.join("ddpm_variability.png");
        panel.save(&var_path)?;
        println!(
            "variability panel ({variability_samples} samples, no averaging) -> {}",
            var_path.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn cmd_report(run_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let reports_dir = run_dir.join("reports");
    if !reports_dir.exists() {
        bail!(MissingArtifact(format!("{}", reports_dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&reports_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(MissingArtifact(format!(
            "no report files in {}",
            reports_dir.display()
        )));
    }
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(
        w,
        "{},dataset_hash,config_hash",
        eit_core::metrics::EvalReport::CSV_HEADER
    )?;
    let mut ordered: Vec<ReportFile> = Vec::new();
    for path in &files {
        let file: ReportFile =
            serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        ordered.push(file);
    }
    // Canonical method order, then anything else alphabetically.
    ordered.sort_by_key(|r| {
        Method::ALL
            .iter()
            .position(|m| m.name() == r.report.method)
            .unwrap_or(usize::MAX)
    });
    for file in &ordered {
        writeln!(
            w,
            "{},{},{}",
            file.report.csv_row(),
            file.dataset_hash,
            file.config_hash
        )?;
    }
    println!("{} method rows -> {}", ordered.len(), out.display());
    Ok(())
}
