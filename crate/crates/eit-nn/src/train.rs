//! Training loops for both correction operators.
//!
//! Batches are sampled without replacement each epoch; per-sample forward and
//! backward passes run on the parallel lane and gradients are reduced in
//! sample order, so training is bit-reproducible on any lane. Every stochastic
//! draw (shuffling, timestep, noise) comes from a seed derived from
//! `(master seed, epoch, slot)`.

use eit_core::dataset::{derive_seed, EitDataset, FieldStats};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ddpm::{forward_noising, LossWeighting, NoiseSchedule};
use crate::error::{NnError, Result};
use crate::graph::Graph;
use crate::optim::{AdamState, LrSchedule};
use crate::params::ParamStore;
use crate::resnet::{InputMode, ResNetConfig, ResNetModel};
use crate::tensor::Tensor;
use crate::unet::{UnetConfig, UnetModel};

const SHUFFLE_TAG: u64 = 0x51AF;
const VAL_TAG: u64 = 0x7A1;

/// Common knobs shared by both trainers.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: LrSchedule,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

impl TrainLog {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "epoch,train_loss,val_loss,lr")?;
        for r in &self.records {
            writeln!(w, "{},{:e},{:e},{:e}", r.epoch, r.train_loss, r.val_loss, r.lr)?;
        }
        Ok(())
    }
}

pub fn standardize(data: &[f64], stats: &FieldStats) -> Vec<f64> {
    data.iter().map(|v| (v - stats.mean) / stats.std).collect()
}

pub fn destandardize(data: &[f64], stats: &FieldStats) -> Vec<f64> {
    data.iter().map(|v| v * stats.std + stats.mean).collect()
}

/// Raw (unstandardized) condition image for sample `i`: the truncated-L-BFGS
/// estimate for correctors, or the measurement resized to the image grid for
/// the direct baselines.
pub fn raw_condition(ds: &EitDataset, i: usize, mode: InputMode) -> Result<Tensor> {
    let n = ds.image_size();
    match mode {
        InputMode::InitialGuess => {
            Tensor::from_vec(&[1, 1, n, n], ds.sigma_hat(i).to_vec())
        }
        InputMode::DirectMeasurement => {
            let nb = ds.meta.n_boundary;
            let m = Array2::from_shape_vec((nb, nb), ds.measurement(i).to_vec())
                .map_err(|e| NnError::Shape(e.to_string()))?;
            let resized = eit_core::raster::resize_bilinear(&m, n);
            Tensor::from_vec(&[1, 1, n, n], resized.iter().copied().collect())
        }
    }
}

/// Stats used to standardize the condition channel for a given input mode.
pub fn condition_stats(ds: &EitDataset, mode: InputMode) -> FieldStats {
    match mode {
        InputMode::InitialGuess => ds.meta.sigma_true_stats.clone(),
        InputMode::DirectMeasurement => ds.meta.measurement_stats.clone(),
    }
}

/// Standardized (condition, target) tensors for the given sample indices.
struct Prepared {
    conditions: Vec<Tensor>,
    targets: Vec<Tensor>,
}

fn prepare(ds: &EitDataset, indices: &[usize], mode: InputMode) -> Result<Prepared> {
    let n = ds.image_size();
    let img_stats = ds.meta.sigma_true_stats.clone();
    let cond_stats = condition_stats(ds, mode);
    let mut conditions = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    for &i in indices {
        let raw = raw_condition(ds, i, mode)?;
        conditions.push(Tensor::from_vec(
            &[1, 1, n, n],
            standardize(raw.data(), &cond_stats),
        )?);
        targets.push(Tensor::from_vec(
            &[1, 1, n, n],
            standardize(ds.sigma_true(i), &img_stats),
        )?);
    }
    Ok(Prepared {
        conditions,
        targets,
    })
}

/// Stack per-sample (1, C, n, n) tensors into one (B, C, n, n) batch.
fn stack_batch(items: &[Tensor], indices: &[usize]) -> Result<Tensor> {
    let first = &items[indices[0]];
    let mut shape = first.shape().to_vec();
    shape[0] = indices.len();
    let mut data = Vec::with_capacity(first.len() * indices.len());
    for &i in indices {
        data.extend_from_slice(items[i].data());
    }
    Tensor::from_vec(&shape, data)
}

fn shuffled_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, SHUFFLE_TAG), epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.ids().map(|id| store.get(id).clone()).collect()
}

fn restore(store: &mut ParamStore, snap: &[Tensor]) {
    for (id, tensor) in store.ids().collect::<Vec<_>>().into_iter().zip(snap) {
        *store.get_mut(id) = tensor.clone();
    }
}

/// Result of [`train_resnet`]: the model with best-validation weights plus
/// the standardization info needed at inference.
pub struct TrainedResnet {
    pub model: ResNetModel,
    pub image_stats: FieldStats,
    pub cond_stats: FieldStats,
    pub epoch: usize,
    pub lr_schedule: LrSchedule,
}

impl TrainedResnet {
    /// Apply the correction to raw-unit condition images (B, 1, n, n),
    /// returning raw-unit outputs.
    pub fn correct(&self, raw: &Tensor) -> Result<Tensor> {
        let std_in = Tensor::from_vec(raw.shape(), standardize(raw.data(), &self.cond_stats))?;
        let mut g = Graph::new(&self.model.store);
        let x = g.input(std_in);
        let y = self.model.forward(&mut g, x)?;
        let out = g.value(y);
        Tensor::from_vec(out.shape(), destandardize(out.data(), &self.image_stats))
    }
}

/// Train the ResNet corrector (or direct baseline) on a dataset with MSE
/// loss and Adam. Keeps the best-validation-loss weights.
pub fn train_resnet(
    ds: &EitDataset,
    config: ResNetConfig,
    opts: &TrainOptions,
) -> Result<(TrainedResnet, TrainLog)> {
    if config.image_size != ds.image_size() {
        return Err(NnError::Shape("config/dataset image size mismatch".into()));
    }
    let mode = config.input_mode;
    let train = prepare(ds, &ds.splits.train, mode)?;
    let val = prepare(ds, &ds.splits.val, mode)?;
    let mut model = ResNetModel::new(config, derive_seed(opts.seed, 0))?;
    let mut adam = AdamState::new(&model.store);

    let mut log = TrainLog {
        records: Vec::new(),
        best_epoch: 0,
        best_val: f64::INFINITY,
    };
    let mut best: Vec<Tensor> = snapshot(&model.store);

    for epoch in 0..opts.epochs {
        let lr = opts.lr.rate(epoch);
        let order = shuffled_order(train.conditions.len(), opts.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let mut g = Graph::new(&model.store);
            let x = g.input(stack_batch(&train.conditions, batch)?);
            let y = model.forward(&mut g, x)?;
            let t = g.input(stack_batch(&train.targets, batch)?);
            let loss = g.mse_loss(y, t)?;
            let batch_loss = g.value(loss).item()?;
            if !batch_loss.is_finite() {
                return Err(NnError::Training(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            let grads = g.backward(loss)?;
            epoch_loss += batch_loss * batch.len() as f64;
            adam.step(&mut model.store, &grads, lr);
        }
        let train_loss = epoch_loss / train.conditions.len() as f64;

        let mut val_loss = 0.0;
        let val_indices: Vec<usize> = (0..val.conditions.len()).collect();
        for chunk in val_indices.chunks(32) {
            let mut g = Graph::new(&model.store);
            let x = g.input(stack_batch(&val.conditions, chunk)?);
            let y = model.forward(&mut g, x)?;
            let t = g.input(stack_batch(&val.targets, chunk)?);
            let loss = g.mse_loss(y, t)?;
            val_loss += g.value(loss).item()? * chunk.len() as f64;
        }
        val_loss /= val.conditions.len().max(1) as f64;

        // Checkpoint selection falls back to the training loss when the
        // validation split is empty (tiny datasets).
        let criterion = if val.conditions.is_empty() {
            train_loss
        } else {
            val_loss
        };
        if criterion < log.best_val {
            log.best_val = criterion;
            log.best_epoch = epoch;
            best = snapshot(&model.store);
        }
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
    }

    restore(&mut model.store, &best);
    let image_stats = ds.meta.sigma_true_stats.clone();
    let cond_stats = condition_stats(ds, mode);
    Ok((
        TrainedResnet {
            model,
            image_stats,
            cond_stats,
            epoch: log.best_epoch,
            lr_schedule: opts.lr.clone(),
        },
        log,
    ))
}

/// MSE of the identity map (output = condition) on the validation split, in
/// the same standardized units as the training loss. The corrector must beat
/// this to be doing anything at all.
pub fn identity_baseline_val_mse(ds: &EitDataset, mode: InputMode) -> Result<f64> {
    let val = prepare(ds, &ds.splits.val, mode)?;
    let mut acc = 0.0;
    for (c, t) in val.conditions.iter().zip(&val.targets) {
        let n = c.len() as f64;
        acc += c
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
    }
    Ok(acc / val.conditions.len().max(1) as f64)
}

/// Result of [`train_ddpm`]: denoiser weights plus schedule and
/// standardization info.
pub struct TrainedDdpm {
    pub model: UnetModel,
    pub schedule: NoiseSchedule,
    pub beta_range: (f64, f64),
    pub conditioning: InputMode,
    pub weighting: LossWeighting,
    pub image_stats: FieldStats,
    pub cond_stats: FieldStats,
    pub epoch: usize,
    pub lr_schedule: LrSchedule,
}

impl crate::ddpm::Denoiser for TrainedDdpm {
    fn predict_noise(&self, x_t: &Tensor, condition: &Tensor, t: usize) -> Result<Tensor> {
        let (b, _, n, _) = x_t.dims4()?;
        let mut data = Vec::with_capacity(2 * b * n * n);
        let hw = n * n;
        for bi in 0..b {
            data.extend_from_slice(&x_t.data()[bi * hw..(bi + 1) * hw]);
            data.extend_from_slice(&condition.data()[bi * hw..(bi + 1) * hw]);
        }
        let x = Tensor::from_vec(&[b, 2, n, n], data)?;
        self.model.predict(&x, &vec![t; b])
    }
}

impl TrainedDdpm {
    /// Draw conditional samples in raw conductivity units. `condition_raw`
    /// is (B, 1, n, n) with one seed per batch item.
    pub fn sample(&self, condition_raw: &Tensor, seeds: &[u64]) -> Result<Tensor> {
        let cond = Tensor::from_vec(
            condition_raw.shape(),
            standardize(condition_raw.data(), &self.cond_stats),
        )?;
        let x0 = crate::ddpm::ddpm_sample_batch(self, &cond, &self.schedule, seeds)?;
        Tensor::from_vec(x0.shape(), destandardize(x0.data(), &self.image_stats))
    }

    /// Mean over `n_samples` posterior draws, in raw units.
    pub fn posterior_mean(
        &self,
        condition_raw: &Tensor,
        n_samples: usize,
        seed: u64,
    ) -> Result<Tensor> {
        let cond = Tensor::from_vec(
            condition_raw.shape(),
            standardize(condition_raw.data(), &self.cond_stats),
        )?;
        let mean = crate::ddpm::posterior_mean(self, &cond, &self.schedule, n_samples, seed)?;
        Tensor::from_vec(mean.shape(), destandardize(mean.data(), &self.image_stats))
    }
}

/// DDPM training options: the shared knobs plus the noise-chain horizon.
#[derive(Debug, Clone)]
pub struct DdpmTrainOptions {
    pub base: TrainOptions,
    pub t_steps: usize,
    /// Explicit beta endpoints; `None` selects the scaled-linear default.
    pub beta_range: Option<(f64, f64)>,
    pub weighting: LossWeighting,
}

/// One denoiser training step's stochastic draws for one sample.
fn draw_t_eps(
    seed: u64,
    epoch: usize,
    slot: usize,
    t_steps: usize,
    n: usize,
) -> (usize, Tensor) {
    let s = derive_seed(derive_seed(seed, epoch as u64), slot as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let t = rng.gen_range(1..=t_steps);
    let data: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    (t, Tensor::from_vec(&[1, 1, n, n], data).expect("noise shape"))
}

/// Train the conditional denoiser with the (optionally ELBO-weighted)
/// noise-prediction loss; `mode` picks what the condition channel carries.
pub fn train_ddpm(
    ds: &EitDataset,
    unet_config: UnetConfig,
    opts: &DdpmTrainOptions,
    mode: InputMode,
) -> Result<(TrainedDdpm, TrainLog)> {
    if unet_config.image_size != ds.image_size() {
        return Err(NnError::Shape("config/dataset image size mismatch".into()));
    }
    if unet_config.in_channels != 2 {
        return Err(NnError::Shape(
            "conditional denoiser needs 2 input channels".into(),
        ));
    }
    let n = ds.image_size();
    let schedule = match opts.beta_range {
        Some((b1, bt)) => NoiseSchedule::linear(opts.t_steps, b1, bt)?,
        None => NoiseSchedule::scaled_linear(opts.t_steps)?,
    };
    schedule.validate_terminal()?;
    let beta_range = (schedule.beta(1), schedule.beta(opts.t_steps));

    let train = prepare(ds, &ds.splits.train, mode)?;
    let val = prepare(ds, &ds.splits.val, mode)?;
    let mut model = UnetModel::new(unet_config, derive_seed(opts.base.seed, 0))?;
    let mut adam = AdamState::new(&model.store);

    // Frozen validation draws make the validation loss a deterministic
    // function of the weights.
    let val_draws: Vec<(usize, Tensor)> = (0..val.conditions.len())
        .map(|i| draw_t_eps(derive_seed(opts.base.seed, VAL_TAG), 0, i, opts.t_steps, n))
        .collect();

    let mut log = TrainLog {
        records: Vec::new(),
        best_epoch: 0,
        best_val: f64::INFINITY,
    };
    let mut best = snapshot(&model.store);

    for epoch in 0..opts.base.epochs {
        let lr = opts.base.lr.rate(epoch);
        let order = shuffled_order(train.conditions.len(), opts.base.seed, epoch);
        let mut epoch_loss = 0.0;
        for (chunk_idx, batch) in order.chunks(opts.base.batch_size).enumerate() {
            let base_slot = chunk_idx * opts.base.batch_size;
            let b = batch.len();
            let mut joint = Vec::with_capacity(b * 2 * n * n);
            let mut eps_all = Vec::with_capacity(b * n * n);
            let mut ts = Vec::with_capacity(b);
            let mut weights = Vec::with_capacity(b);
            for (bi, &idx) in batch.iter().enumerate() {
                let (t, eps) =
                    draw_t_eps(opts.base.seed, epoch, base_slot + bi, opts.t_steps, n);
                let x_t = forward_noising(&train.targets[idx], t, &eps, &schedule)?;
                joint.extend_from_slice(x_t.data());
                joint.extend_from_slice(train.conditions[idx].data());
                eps_all.extend_from_slice(eps.data());
                weights.push(opts.weighting.weight(&schedule, t));
                ts.push(t);
            }
            let mut g = Graph::new(&model.store);
            let x = g.input(Tensor::from_vec(&[b, 2, n, n], joint)?);
            let pred = model.forward(&mut g, x, &ts)?;
            let target = g.input(Tensor::from_vec(&[b, 1, n, n], eps_all)?);
            let loss = g.weighted_mse_loss(pred, target, weights)?;
            let batch_loss = g.value(loss).item()?;
            if !batch_loss.is_finite() {
                return Err(NnError::Training(format!(
                    "non-finite diffusion loss at epoch {epoch}"
                )));
            }
            let grads = g.backward(loss)?;
            epoch_loss += batch_loss * b as f64;
            adam.step(&mut model.store, &grads, lr);
        }
        let train_loss = epoch_loss / train.conditions.len() as f64;

        let mut val_loss = 0.0;
        let val_indices: Vec<usize> = (0..val.conditions.len()).collect();
        for chunk in val_indices.chunks(32) {
            let b = chunk.len();
            let mut joint = Vec::with_capacity(b * 2 * n * n);
            let mut eps_all = Vec::with_capacity(b * n * n);
            let mut ts = Vec::with_capacity(b);
            let mut weights = Vec::with_capacity(b);
            for &i in chunk {
                let (t, eps) = &val_draws[i];
                let x_t = forward_noising(&val.targets[i], *t, eps, &schedule)?;
                joint.extend_from_slice(x_t.data());
                joint.extend_from_slice(val.conditions[i].data());
                eps_all.extend_from_slice(eps.data());
                weights.push(opts.weighting.weight(&schedule, *t));
                ts.push(*t);
            }
            let mut g = Graph::new(&model.store);
            let x = g.input(Tensor::from_vec(&[b, 2, n, n], joint)?);
            let pred = model.forward(&mut g, x, &ts)?;
            let target = g.input(Tensor::from_vec(&[b, 1, n, n], eps_all)?);
            let loss = g.weighted_mse_loss(pred, target, weights)?;
            val_loss += g.value(loss).item()? * b as f64;
        }
        val_loss /= val.conditions.len().max(1) as f64;

        let criterion = if val.conditions.is_empty() {
            train_loss
        } else {
            val_loss
        };
        if criterion < log.best_val {
            log.best_val = criterion;
            log.best_epoch = epoch;
            best = snapshot(&model.store);
        }
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
    }

    restore(&mut model.store, &best);
    let image_stats = ds.meta.sigma_true_stats.clone();
    let cond_stats = condition_stats(ds, mode);
    Ok((
        TrainedDdpm {
            model,
            schedule,
            beta_range,
            conditioning: mode,
            weighting: opts.weighting,
            image_stats,
            cond_stats,
            epoch: log.best_epoch,
            lr_schedule: opts.base.lr.clone(),
        },
        log,
    ))
}
