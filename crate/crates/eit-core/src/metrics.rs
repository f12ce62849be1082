//! Evaluation metrics: measurement-space relative l2 error, solution-space
//! relative l1 error, PSNR, and SSIM, plus the per-sample/aggregate report.
//!
//! PSNR and SSIM use a per-sample data range `max(truth) - min(truth)`;
//! constant-truth samples (an empty Four Circles subset rasterizes to all
//! ones) fall back to a unit range so they cannot poison aggregates.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fem::{Conductivity, D2NMatrix, FemContext};
use crate::raster::{image_to_mesh, ImageGrid};

/// `||M_rec - M_obs||_F / ||M_obs||_F` for a mesh-valued reconstruction.
pub fn rel_l2_measurement_mesh(
    ctx: &FemContext,
    sigma: &Conductivity,
    m_obs: &D2NMatrix,
) -> Result<f64> {
    let m_rec = ctx.forward(sigma)?.into_d2n();
    Ok(m_rec.rel_frobenius_distance(m_obs))
}

/// Measurement error of an image-valued reconstruction: the image is sampled
/// back onto the mesh at element centroids first.
pub fn rel_l2_measurement_image(
    ctx: &FemContext,
    image: &ImageGrid,
    m_obs: &D2NMatrix,
) -> Result<f64> {
    let sigma = image_to_mesh(image, ctx.mesh())?;
    rel_l2_measurement_mesh(ctx, &sigma, m_obs)
}

/// `||a - b||_1 / ||b||_1` over all pixels.
pub fn rel_l1_solution(rec: &ImageGrid, truth: &ImageGrid) -> Result<f64> {
    if rec.size() != truth.size() {
        return Err(CoreError::invalid("image size mismatch"));
    }
    let num: f64 = rec
        .pixels()
        .iter()
        .zip(truth.pixels())
        .map(|(a, b)| (a - b).abs())
        .sum();
    let den: f64 = truth.pixels().iter().map(|v| v.abs()).sum();
    Ok(num / den)
}

/// Per-sample data range of the ground truth with the constant-image
/// fallback.
pub fn data_range(truth: &ImageGrid) -> f64 {
    let max = truth.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = truth.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if range > 0.0 {
        range
    } else {
        1.0
    }
}

/// Peak signal-to-noise ratio in dB; identical images return the infinity
/// sentinel.
pub fn psnr(rec: &ImageGrid, truth: &ImageGrid, range: f64) -> Result<f64> {
    if rec.size() != truth.size() {
        return Err(CoreError::invalid("image size mismatch"));
    }
    if range <= 0.0 {
        return Err(CoreError::invalid("data range must be positive"));
    }
    let n = (rec.size() * rec.size()) as f64;
    let mse: f64 = rec
        .pixels()
        .iter()
        .zip(truth.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *wi = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *wi;
    }
    for wi in &mut w {
        *wi /= sum;
    }
    w
}

/// Gaussian-filter `src` with the separable 11-tap window, valid positions
/// only.
fn filter_valid(src: &Array2<f64>) -> Array2<f64> {
    let w = gaussian_window();
    let n = src.nrows();
    let m = n - SSIM_WINDOW + 1;
    let mut rows = Array2::<f64>::zeros((m, n));
    for r in 0..m {
        for c in 0..n {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * src[[r + k, c]];
            }
            rows[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((m, m));
    for r in 0..m {
        for c in 0..m {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * rows[[r, c + k]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Structural similarity with the standard 11x11 Gaussian window (sigma 1.5)
/// and constants `C1 = (0.01 R)^2`, `C2 = (0.03 R)^2`, averaged over valid
/// window positions.
pub fn ssim(rec: &ImageGrid, truth: &ImageGrid, range: f64) -> Result<f64> {
    if rec.size() != truth.size() {
        return Err(CoreError::invalid("image size mismatch"));
    }
    if rec.size() < SSIM_WINDOW {
        return Err(CoreError::invalid(format!(
            "images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM"
        )));
    }
    if range <= 0.0 {
        return Err(CoreError::invalid("data range must be positive"));
    }
    let x = rec.pixels();
    let y = truth.pixels();
    let mu_x = filter_valid(x);
    let mu_y = filter_valid(y);
    let xx = filter_valid(&(x * x));
    let yy = filter_valid(&(y * y));
    let xy = filter_valid(&(x * y));

    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let m = mu_x.nrows();
    let mut acc = 0.0;
    for r in 0..m {
        for c in 0..m {
            let mx = mu_x[[r, c]];
            let my = mu_y[[r, c]];
            let var_x = xx[[r, c]] - mx * mx;
            let var_y = yy[[r, c]] - my * my;
            let cov = xy[[r, c]] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
        }
    }
    Ok(acc / (m * m) as f64)
}

/// Per-sample metric values for one method on one test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerSampleMetrics {
    pub rel_l2_measurement: Vec<f64>,
    pub rel_l1_solution: Vec<f64>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

/// Mean and (sample) standard deviation of one metric.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Aggregate { mean, std }
}

/// Four-metric evaluation report for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub n_samples: usize,
    pub rel_l2_measurement: Aggregate,
    pub rel_l1_solution: Aggregate,
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    pub per_sample: PerSampleMetrics,
}

impl EvalReport {
    pub fn from_samples(method: impl Into<String>, per_sample: PerSampleMetrics) -> Self {
        EvalReport {
            method: method.into(),
            n_samples: per_sample.rel_l1_solution.len(),
            rel_l2_measurement: aggregate(&per_sample.rel_l2_measurement),
            rel_l1_solution: aggregate(&per_sample.rel_l1_solution),
            psnr: aggregate(&per_sample.psnr),
            ssim: aggregate(&per_sample.ssim),
            per_sample,
        }
    }

    /// One CSV row matching the report table header.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6e},{:.6},{:.6},{:.4},{:.4},{:.4},{:.4}",
            self.method,
            self.n_samples,
            self.rel_l2_measurement.mean,
            self.rel_l2_measurement.std,
            self.rel_l1_solution.mean,
            self.rel_l1_solution.std,
            self.psnr.mean,
            self.psnr.std,
            self.ssim.mean,
            self.ssim.std
        )
    }

    pub const CSV_HEADER: &'static str = "method,n_samples,rel_l2_measurement_mean,rel_l2_measurement_std,rel_l1_solution_mean,rel_l1_solution_std,psnr_mean,psnr_std,ssim_mean,ssim_std";
}
