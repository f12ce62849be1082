//! Conditional denoising diffusion: the forward noising chain, ancestral
//! sampling, and the posterior-mean estimator.
//!
//! Timesteps are 1-based (`t = 1..=T`) matching the discrete chain
//! `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`. Sampling runs the
//! reverse chain `x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) eps_theta)/sqrt(alpha_t)
//! + sqrt(beta_t) z` with `z = 0` at the final step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Reference horizon for the scaled-linear beta range: a linear
/// 1e-4 -> 0.02 schedule at 1000 steps, rescaled as 1000/T for other
/// horizons so the terminal signal level stays fixed.
const REFERENCE_T: f64 = 1000.0;
const REFERENCE_BETA_START: f64 = 1e-4;
const REFERENCE_BETA_END: f64 = 0.02;

/// Variance schedule: strictly increasing `beta_t` in (0,1) with the
/// cumulative products `abar_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation `beta_t = beta1 + (t-1)(betaT - beta1)/(T-1)`.
    pub fn linear(t_steps: usize, beta1: f64, beta_t: f64) -> Result<Self> {
        if t_steps < 2 {
            return Err(NnError::Shape("linear schedule needs T >= 2".into()));
        }
        if !(0.0 < beta1 && beta1 < beta_t && beta_t < 1.0) {
            return Err(NnError::Shape(format!(
                "need 0 < beta1 < betaT < 1, got ({beta1}, {beta_t})"
            )));
        }
        let betas = (0..t_steps)
            .map(|i| beta1 + i as f64 * (beta_t - beta1) / (t_steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    /// The default production schedule for a horizon of `t_steps`: linear
    /// with the reference endpoints scaled by `1000 / T`, which keeps the
    /// terminal marginal near-Gaussian (`abar_T ~ 4e-5`) at every horizon.
    pub fn scaled_linear(t_steps: usize) -> Result<Self> {
        let scale = REFERENCE_T / t_steps as f64;
        Self::linear(
            t_steps,
            REFERENCE_BETA_START * scale,
            REFERENCE_BETA_END * scale,
        )
    }

    /// Build from explicit betas (test hook; admits T = 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(NnError::Shape("empty beta schedule".into()));
        }
        for pair in betas.windows(2) {
            if pair[1] <= pair[0] {
                return Err(NnError::Shape("betas must be strictly increasing".into()));
            }
        }
        if betas[0] <= 0.0 || *betas.last().unwrap() >= 1.0 {
            return Err(NnError::Shape("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `beta_t` for 1-based `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn terminal_alpha_bar(&self) -> f64 {
        *self.alpha_bars.last().unwrap()
    }

    /// Production schedules must end in a near-Gaussian marginal.
    pub fn validate_terminal(&self) -> Result<()> {
        let abar = self.terminal_alpha_bar();
        if abar > 0.01 {
            return Err(NnError::Shape(format!(
                "terminal alpha_bar {abar:.4} exceeds 0.01; the forward chain does not reach noise"
            )));
        }
        Ok(())
    }
}

/// `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps` for 1-based `t`.
pub fn forward_noising(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if t < 1 || t > schedule.len() {
        return Err(NnError::Shape(format!(
            "timestep {t} outside 1..={}",
            schedule.len()
        )));
    }
    if x0.shape() != eps.shape() {
        return Err(NnError::Shape("noise/image shape mismatch".into()));
    }
    let abar = schedule.alpha_bar(t);
    let (sa, sn) = (abar.sqrt(), (1.0 - abar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| sa * x + sn * e)
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Anything that predicts the injected noise given the noisy image, the
/// conditioning image, and the (1-based) timestep. Inputs and outputs are
/// (B, 1, n, n).
pub trait Denoiser {
    fn predict_noise(&self, x_t: &Tensor, condition: &Tensor, t: usize) -> Result<Tensor>;
}

/// Draw a standard-normal tensor per batch item from per-item rng streams,
/// so results do not depend on how samples are batched.
fn normal_batch(shape_per_item: &[usize], rngs: &mut [ChaCha8Rng]) -> Tensor {
    let item_len: usize = shape_per_item.iter().product();
    let mut data = Vec::with_capacity(item_len * rngs.len());
    for rng in rngs.iter_mut() {
        for _ in 0..item_len {
            let v: f64 = StandardNormal.sample(rng);
            data.push(v);
        }
    }
    let mut shape = vec![rngs.len()];
    shape.extend_from_slice(shape_per_item);
    Tensor::from_vec(&shape, data).expect("shape arithmetic")
}

/// Ancestral sampling of a batch, one independent rng stream per item.
/// Returns x_0 in the (standardized) diffusion space.
pub fn ddpm_sample_batch(
    denoiser: &dyn Denoiser,
    condition: &Tensor,
    schedule: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Tensor> {
    let (b, c, h, w) = condition.dims4()?;
    if c != 1 {
        return Err(NnError::Shape("condition must have one channel".into()));
    }
    if seeds.len() != b {
        return Err(NnError::Shape("one seed per batch item".into()));
    }
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut x = normal_batch(&[1, h, w], &mut rngs);
    for t in (1..=schedule.len()).rev() {
        let eps = denoiser.predict_noise(&x, condition, t)?;
        eps.assert_finite("predicted noise")?;
        let beta = schedule.beta(t);
        let alpha = schedule.alpha(t);
        let abar = schedule.alpha_bar(t);
        let coef = beta / (1.0 - abar).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let mut data: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(xv, ev)| inv_sqrt_alpha * (xv - coef * ev))
            .collect();
        if t > 1 {
            let z = normal_batch(&[1, h, w], &mut rngs);
            let s = beta.sqrt();
            for (d, zv) in data.iter_mut().zip(z.data()) {
                *d += s * zv;
            }
        }
        x = Tensor::from_vec(x.shape(), data)?;
    }
    Ok(x)
}

/// Pixel-wise mean over `n_samples` independent conditional samples; the
/// per-sample seeds derive from `seed` so the estimator is reproducible and
/// batch-order independent.
pub fn posterior_mean(
    denoiser: &dyn Denoiser,
    condition: &Tensor,
    schedule: &NoiseSchedule,
    n_samples: usize,
    seed: u64,
) -> Result<Tensor> {
    if n_samples < 1 {
        return Err(NnError::Shape("n_samples must be >= 1".into()));
    }
    let (b, _, h, w) = condition.dims4()?;
    if b != 1 {
        return Err(NnError::Shape("posterior_mean takes a single condition".into()));
    }
    // Broadcast the condition across the sample batch.
    let mut cond_data = Vec::with_capacity(n_samples * h * w);
    for _ in 0..n_samples {
        cond_data.extend_from_slice(condition.data());
    }
    let cond = Tensor::from_vec(&[n_samples, 1, h, w], cond_data)?;
    let seeds: Vec<u64> = (0..n_samples)
        .map(|i| eit_core::dataset::derive_seed(seed, i as u64))
        .collect();
    let samples = ddpm_sample_batch(denoiser, &cond, schedule, &seeds)?;
    let mut mean = vec![0.0; h * w];
    for i in 0..n_samples {
        for (m, v) in mean
            .iter_mut()
            .zip(&samples.data()[i * h * w..(i + 1) * h * w])
        {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n_samples as f64;
    }
    Tensor::from_vec(&[1, 1, h, w], mean)
}

/// Loss weighting for denoiser training: the simplified uniform weight or
/// the full ELBO weight `beta_t / (2 alpha_t (1 - abar_t))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    Simple,
    Elbo,
}

impl LossWeighting {
    pub fn weight(&self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            LossWeighting::Simple => 1.0,
            LossWeighting::Elbo => {
                schedule.beta(t) / (2.0 * schedule.alpha(t) * (1.0 - schedule.alpha_bar(t)))
            }
        }
    }
}
