//! Shared CLI machinery: exit-code mapping, method registry, prediction and
//! report I/O, hashing, and the evaluation engine behind `evaluate`,
//! `timing`, and `figures`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use eit_core::dataset::{derive_seed, EitDataset};
use eit_core::fem::FemContext;
use eit_core::inverse::{lbfgs_reconstruct, reconstruction_operator, InverseProblem};
use eit_core::mesh::build_disk_mesh;
use eit_core::metrics::{
    data_range, psnr, rel_l1_solution, rel_l2_measurement_image, ssim, EvalReport,
    PerSampleMetrics,
};
use eit_core::raster::{rasterize_conductivity, ImageGrid};
use eit_nn::resnet::InputMode;
use eit_nn::tensor::Tensor;
use eit_nn::train::{raw_condition, TrainedDdpm, TrainedResnet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Exit codes documented in the README: 0 success, 2 config error,
/// 3 missing artifact, 4 numerical failure.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<eit_core::CoreError>() {
        return match core {
            eit_core::CoreError::InvalidArgument(_)
            | eit_core::CoreError::Format(_)
            | eit_core::CoreError::Json(_) => 2,
            eit_core::CoreError::Numerical(_) => 4,
            eit_core::CoreError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            eit_core::CoreError::Io(_) => 1,
        };
    }
    if let Some(nn) = err.downcast_ref::<eit_nn::NnError>() {
        return match nn {
            eit_nn::NnError::Shape(_) | eit_nn::NnError::Json(_) | eit_nn::NnError::Graph(_) => 2,
            eit_nn::NnError::Checkpoint(_) => 2,
            eit_nn::NnError::NonFinite(_) | eit_nn::NnError::Training(_) => 4,
            eit_nn::NnError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            eit_nn::NnError::Io(_) => 1,
            eit_nn::NnError::Core(c) => {
                return exit_code_for(&anyhow!(eit_core::CoreError::Numerical(c.to_string())))
            }
        };
    }
    if let Some(io) = err.downcast_ref::<std::io::Error>() {
        if io.kind() == std::io::ErrorKind::NotFound {
            return 3;
        }
    }
    if let Some(marker) = err.downcast_ref::<MissingArtifact>() {
        let _ = marker;
        return 3;
    }
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    1
}

/// Marker error for "exists in the workflow but not on disk" situations.
#[derive(Debug, thiserror::Error)]
#[error("missing artifact: {0}")]
pub struct MissingArtifact(pub String);

#[derive(Debug, thiserror::Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

/// The six evaluated methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Lbfgs2500,
    Lbfgs2500L2,
    ResnetDirect,
    DdpmDirect,
    LbfgsKResnet,
    LbfgsKDdpm,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Lbfgs2500,
        Method::Lbfgs2500L2,
        Method::ResnetDirect,
        Method::DdpmDirect,
        Method::LbfgsKResnet,
        Method::LbfgsKDdpm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Lbfgs2500 => "lbfgs2500",
            Method::Lbfgs2500L2 => "lbfgs2500_l2",
            Method::ResnetDirect => "resnet_direct",
            Method::DdpmDirect => "ddpm_direct",
            Method::LbfgsKResnet => "lbfgsK_resnet",
            Method::LbfgsKDdpm => "lbfgsK_ddpm",
        }
    }

    pub fn parse(s: &str) -> anyhow::Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                anyhow!(ConfigError(format!(
                    "unknown method '{s}' (expected one of {})",
                    Method::ALL.map(|m| m.name()).join(", ")
                )))
            })
    }
}

/// SHA-256 over a list of files, streamed in order.
pub fn hash_files(paths: &[PathBuf]) -> anyhow::Result<String> {
    let mut hasher = Sha256::new();
    for path in paths {
        let bytes = std::fs::read(path)
            .with_context(|| format!("hashing {}", path.display()))?;
        hasher.update(&bytes);
    }
    Ok(hex_digest(&hasher.finalize()))
}

pub fn hash_string(s: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(s.as_bytes());
    hex_digest(&hasher.finalize())
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the five dataset files.
pub fn dataset_hash(dir: &Path) -> anyhow::Result<String> {
    let names = [
        "meta.json",
        "splits.json",
        "sigma_true.f64",
        "sigma_hat.f64",
        "measurements.f64",
    ];
    hash_files(&names.map(|n| dir.join(n)))
}

/// Everything `evaluate` needs to run one method.
pub struct MethodContext<'a> {
    pub dataset: &'a EitDataset,
    pub fem: &'a FemContext,
    /// Max iterations for the full L-BFGS baselines (2500 unless overridden).
    pub baseline_iters: usize,
    /// Posterior samples per DDPM estimate.
    pub posterior_samples: usize,
    pub sample_seed: u64,
    pub resnet: Option<&'a TrainedResnet>,
    pub ddpm: Option<&'a TrainedDdpm>,
}

pub fn fem_context_for(ds: &EitDataset) -> anyhow::Result<FemContext> {
    let mesh = build_disk_mesh(ds.meta.config.mesh_rings, ds.meta.config.mesh_boundary)?;
    Ok(FemContext::new(mesh))
}

fn tensor_to_image(t: &Tensor, n: usize) -> anyhow::Result<ImageGrid> {
    Ok(ImageGrid::from_flat(n, t.data().to_vec())?)
}

fn require_mode(actual: InputMode, wanted: InputMode, what: &str) -> anyhow::Result<()> {
    if actual != wanted {
        bail!(ConfigError(format!(
            "{what} checkpoint was trained in {actual:?} mode, method needs {wanted:?}"
        )));
    }
    Ok(())
}

/// Select the Tikhonov weight from {1e-3 .. 1e-9} by the measurement misfit
/// of regularized reconstructions on the validation split.
pub fn select_lambda(
    ds: &EitDataset,
    fem: &FemContext,
    iters: usize,
) -> anyhow::Result<f64> {
    let grid: Vec<f64> = (3..=9).map(|i| 10f64.powi(-i)).collect();
    let val = &ds.splits.val;
    if val.is_empty() {
        bail!(ConfigError("validation split is empty; cannot select lambda".into()));
    }
    let mut best = (f64::INFINITY, grid[0]);
    for &lambda in &grid {
        let mut total = 0.0;
        for &i in val {
            let m_obs = ds.measurement_matrix(i)?;
            let problem =
                InverseProblem::from_context(FemContext::new(fem.mesh().clone()), m_obs.clone(), lambda)?;
            let init = eit_core::fem::Conductivity::constant(fem.mesh().n_elements(), 1.0)?;
            let result = lbfgs_reconstruct(&problem, init, iters, 10, 1e-10)?;
            let sigma = eit_core::fem::Conductivity::new(result.x)?;
            let m_rec = fem.forward(&sigma)?.into_d2n();
            total += m_rec.rel_frobenius_distance(&m_obs);
        }
        let mean = total / val.len() as f64;
        if mean < best.0 {
            best = (mean, lambda);
        }
    }
    Ok(best.1)
}

/// Produce the reconstruction image for one test sample under a method.
fn predict_one(ctxm: &MethodContext, method: Method, lambda: f64, i: usize) -> anyhow::Result<ImageGrid> {
    let ds = ctxm.dataset;
    let n = ds.image_size();
    match method {
        Method::Lbfgs2500 | Method::Lbfgs2500L2 => {
            let m_obs = ds.measurement_matrix(i)?;
            let lam = if method == Method::Lbfgs2500 { 0.0 } else { lambda };
            let sigma = if lam == 0.0 {
                reconstruction_operator(
                    FemContext::new(ctxm.fem.mesh().clone()),
                    &m_obs,
                    ctxm.baseline_iters,
                )?
                .0
            } else {
                let problem = InverseProblem::from_context(
                    FemContext::new(ctxm.fem.mesh().clone()),
                    m_obs,
                    lam,
                )?;
                let init =
                    eit_core::fem::Conductivity::constant(ctxm.fem.mesh().n_elements(), 1.0)?;
                let result = lbfgs_reconstruct(&problem, init, ctxm.baseline_iters, 10, 1e-10)?;
                eit_core::fem::Conductivity::new(result.x)?
            };
            Ok(rasterize_conductivity(ctxm.fem.mesh(), &sigma, n)?)
        }
        Method::ResnetDirect | Method::LbfgsKResnet => {
            let trained = ctxm
                .resnet
                .ok_or_else(|| MissingArtifact("resnet checkpoint".into()))?;
            let mode = if method == Method::ResnetDirect {
                InputMode::DirectMeasurement
            } else {
                InputMode::InitialGuess
            };
            require_mode(trained.model.config.input_mode, mode, "resnet")?;
            let cond = raw_condition(ds, i, mode)?;
            let out = trained.correct(&cond)?;
            tensor_to_image(&out, n)
        }
        Method::DdpmDirect | Method::LbfgsKDdpm => {
            let trained = ctxm
                .ddpm
                .ok_or_else(|| MissingArtifact("ddpm checkpoint".into()))?;
            let mode = if method == Method::DdpmDirect {
                InputMode::DirectMeasurement
            } else {
                InputMode::InitialGuess
            };
            require_mode(trained.conditioning, mode, "ddpm")?;
            let cond = raw_condition(ds, i, mode)?;
            let mean = trained.posterior_mean(
                &cond,
                ctxm.posterior_samples,
                derive_seed(ctxm.sample_seed, i as u64),
            )?;
            tensor_to_image(&mean, n)
        }
    }
}

/// Run a method over the test split: reconstruction images plus the
/// four-metric report.
pub fn run_method(
    ctxm: &MethodContext,
    method: Method,
) -> anyhow::Result<(Vec<ImageGrid>, EvalReport, f64)> {
    let ds = ctxm.dataset;
    let lambda = if method == Method::Lbfgs2500L2 {
        select_lambda(ds, ctxm.fem, ctxm.baseline_iters)?
    } else {
        0.0
    };
    // Per-sample reconstructions are independent; they run on the parallel
    // lane and collect in test-split order.
    let test = &ds.splits.test;
    let results: Vec<anyhow::Result<ImageGrid>> =
        eit_core::parallel::map_indexed(test.len(), |pos| {
            predict_one(ctxm, method, lambda, test[pos])
        });
    let mut predictions = Vec::with_capacity(test.len());
    for r in results {
        predictions.push(r?);
    }
    let report = evaluate_predictions(ds, ctxm.fem, method.name(), &predictions)?;
    Ok((predictions, report, lambda))
}

/// Metrics of precomputed reconstruction images over the test split.
pub fn evaluate_predictions(
    ds: &EitDataset,
    fem: &FemContext,
    method_name: &str,
    predictions: &[ImageGrid],
) -> anyhow::Result<EvalReport> {
    let test = &ds.splits.test;
    if predictions.len() != test.len() {
        bail!(ConfigError(format!(
            "{} predictions for {} test samples",
            predictions.len(),
            test.len()
        )));
    }
    let n = ds.image_size();
    let mut per = PerSampleMetrics {
        rel_l2_measurement: Vec::new(),
        rel_l1_solution: Vec::new(),
        psnr: Vec::new(),
        ssim: Vec::new(),
    };
    for (pred, &i) in predictions.iter().zip(test) {
        let truth = ImageGrid::from_flat(n, ds.sigma_true(i).to_vec())?;
        let m_obs = ds.measurement_matrix(i)?;
        per.rel_l2_measurement
            .push(rel_l2_measurement_image(fem, pred, &m_obs)?);
        per.rel_l1_solution.push(rel_l1_solution(pred, &truth)?);
        let range = data_range(&truth);
        per.psnr.push(psnr(pred, &truth, range)?);
        per.ssim.push(ssim(pred, &truth, range)?);
    }
    Ok(EvalReport::from_samples(method_name, per))
}

/// Prediction blob sidecar.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionSidecar {
    pub method: String,
    pub image_size: usize,
    pub test_indices: Vec<usize>,
    pub dataset_hash: String,
}

pub fn save_predictions(
    dir: &Path,
    method: Method,
    predictions: &[ImageGrid],
    sidecar: &PredictionSidecar,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut flat = Vec::new();
    for p in predictions {
        flat.extend(p.pixels().iter().copied());
    }
    eit_core::blob::write_f64_file(&dir.join(format!("{}.f64", method.name())), &flat)?;
    let f = std::fs::File::create(dir.join(format!("{}.pred.json", method.name())))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), sidecar)?;
    Ok(())
}

pub fn load_predictions(dir: &Path, method_name: &str) -> anyhow::Result<(Vec<ImageGrid>, PredictionSidecar)> {
    let sidecar_path = dir.join(format!("{method_name}.pred.json"));
    if !sidecar_path.exists() {
        bail!(MissingArtifact(format!(
            "{} (no predictions for {method_name})",
            sidecar_path.display()
        )));
    }
    let sidecar: PredictionSidecar =
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(&sidecar_path)?))?;
    let n = sidecar.image_size;
    let count = sidecar.test_indices.len();
    let data = eit_core::blob::read_f64_file(
        &dir.join(format!("{method_name}.f64")),
        Some(count * n * n),
    )?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        out.push(ImageGrid::from_flat(
            n,
            data[i * n * n..(i + 1) * n * n].to_vec(),
        )?);
    }
    Ok((out, sidecar))
}

/// Wrapped report file: metrics plus provenance hashes.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub report: EvalReport,
    pub dataset_hash: String,
    pub config_hash: String,
    pub resolved_config: serde_json::Value,
}

pub fn write_report(path: &Path, report: &ReportFile) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), report)?;
    Ok(())
}

/// Grayscale PNG export with an explicit value range; rows are flipped so
/// positive y points up in the file.
pub fn write_png(path: &Path, image: &ImageGrid, lo: f64, hi: f64) -> anyhow::Result<()> {
    let n = image.size();
    let mut img = image::GrayImage::new(n as u32, n as u32);
    let span = (hi - lo).max(1e-12);
    for row in 0..n {
        for col in 0..n {
            let v = image.pixels()[[row, col]];
            let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(col as u32, (n - 1 - row) as u32, image::Luma([g]));
        }
    }
    img.save(path)?;
    Ok(())
}
