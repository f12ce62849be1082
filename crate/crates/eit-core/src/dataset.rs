//! Dataset generation: phantom -> forward D2N -> optional noise -> truncated
//! L-BFGS reconstruction -> rasterized training pairs, written as raw f64
//! blobs with JSON metadata.
//!
//! Directory layout:
//!   meta.json          distribution, sizes, seeds, mesh params, statistics
//!   sigma_true.f64     N x n_i x n_i, row-major little-endian f64
//!   sigma_hat.f64      N x n_i x n_i
//!   measurements.f64   N x n_b x n_b
//!   splits.json        train/val/test index lists
//!   progress.json      completed-sample counter while generation is running
//!
//! Samples are seeded independently (`seed_i = mix(master_seed, i)`), so
//! chunking and the parallel lane cannot change output bytes, and an aborted
//! run resumes from the last persisted sample index.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{CoreError, Result};
use crate::fem::{D2NMatrix, FemContext};
use crate::inverse::reconstruction_operator;
use crate::mesh::build_disk_mesh;
use crate::parallel::map_indexed;
use crate::phantom::{
    sample_four_circles, sample_shepp_logan, phantom_to_mesh, Phantom, SheppLoganPerturbation,
};
use crate::raster::{rasterize_conductivity, rasterize_phantom};

/// SplitMix64 step; derives per-sample seeds from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ 0x9E3779B97F4A7C15u64.wrapping_mul(index.wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

const NOISE_SEED_TAG: u64 = 0x6E6F_6973;
const SPLIT_SEED_TAG: u64 = 0x7370_6C69;

/// Entry-wise multiplicative factors `1 + eta`, `eta ~ U[-level, level]`
/// drawn in row-major order.
pub fn multiplicative_noise_matrix(n: usize, level: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::<f64>::zeros((n, n));
    for v in out.iter_mut() {
        *v = 1.0 + if level > 0.0 {
            rng.gen_range(-level..level)
        } else {
            0.0
        };
    }
    out
}

/// Corrupt a D2N matrix with multiplicative uniform noise and re-symmetrize.
pub fn add_noise(m: &D2NMatrix, level: f64, seed: u64) -> Result<D2NMatrix> {
    if level < 0.0 {
        return Err(CoreError::invalid("noise level must be >= 0"));
    }
    if level == 0.0 {
        return Ok(m.clone());
    }
    let factors = multiplicative_noise_matrix(m.n_boundary(), level, seed);
    let noisy = m.matrix() * &factors;
    let sym = (&noisy + &noisy.t()) * 0.5;
    D2NMatrix::new(sym)
}

/// Which phantom family a dataset draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    FourCircles,
    SheppLogan,
}

impl std::str::FromStr for Distribution {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "four_circles" => Ok(Distribution::FourCircles),
            "shepp_logan" => Ok(Distribution::SheppLogan),
            other => Err(CoreError::invalid(format!(
                "unknown distribution '{other}' (expected four_circles or shepp_logan)"
            ))),
        }
    }
}

/// Full recipe for one dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub distribution: Distribution,
    pub n_samples: usize,
    /// Truncation iteration count K of the reconstruction operator.
    pub k_iters: usize,
    /// Multiplicative measurement-noise level (0 disables).
    pub noise_level: f64,
    pub seed: u64,
    pub mesh_rings: usize,
    pub mesh_boundary: usize,
    pub image_size: usize,
    #[serde(default = "SheppLoganPerturbation::default")]
    pub shepp_logan_perturbation: SheppLoganPerturbation,
}

/// Mean/std pairs used to standardize tensors before network training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldStats {
    pub mean: f64,
    pub std: f64,
}

/// On-disk dataset description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: DatasetConfig,
    pub n_boundary: usize,
    pub n_elements: usize,
    /// Statistics over the training split, used for standardization.
    pub sigma_true_stats: FieldStats,
    pub sigma_hat_stats: FieldStats,
    pub measurement_stats: FieldStats,
}

/// Train/val/test split indices (80/2/18).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Progress {
    completed: usize,
}

struct SampleRecord {
    sigma_true: Vec<f64>,
    sigma_hat: Vec<f64>,
    measurement: Vec<f64>,
}

fn sample_phantom(config: &DatasetConfig, seed: u64) -> Result<Phantom> {
    match config.distribution {
        Distribution::FourCircles => Ok(Phantom::Circles(sample_four_circles(seed))),
        Distribution::SheppLogan => Ok(Phantom::SheppLogan(sample_shepp_logan(
            seed,
            &config.shepp_logan_perturbation,
        )?)),
    }
}

fn generate_sample(ctx: &FemContext, config: &DatasetConfig, index: usize) -> Result<SampleRecord> {
    let seed = derive_seed(config.seed, index as u64);
    let phantom = sample_phantom(config, seed)?;
    let sigma_mesh = phantom_to_mesh(&phantom, ctx.mesh())?;
    let mut measurement = ctx.forward(&sigma_mesh)?.into_d2n();
    if config.noise_level > 0.0 {
        measurement = add_noise(
            &measurement,
            config.noise_level,
            derive_seed(seed, NOISE_SEED_TAG),
        )?;
    }
    let (sigma_hat, _) = reconstruction_operator(
        FemContext::new(ctx.mesh().clone()),
        &measurement,
        config.k_iters,
    )?;
    let sigma_true_img = rasterize_phantom(&phantom, config.image_size)?;
    let sigma_hat_img = rasterize_conductivity(ctx.mesh(), &sigma_hat, config.image_size)?;
    Ok(SampleRecord {
        sigma_true: sigma_true_img.pixels().iter().copied().collect(),
        sigma_hat: sigma_hat_img.pixels().iter().copied().collect(),
        measurement: measurement.matrix().iter().copied().collect(),
    })
}

/// Paths of the blob files within a dataset directory.
pub struct DatasetPaths {
    pub meta: PathBuf,
    pub sigma_true: PathBuf,
    pub sigma_hat: PathBuf,
    pub measurements: PathBuf,
    pub splits: PathBuf,
    pub progress: PathBuf,
}

impl DatasetPaths {
    pub fn new(dir: &Path) -> Self {
        DatasetPaths {
            meta: dir.join("meta.json"),
            sigma_true: dir.join("sigma_true.f64"),
            sigma_hat: dir.join("sigma_hat.f64"),
            measurements: dir.join("measurements.f64"),
            splits: dir.join("splits.json"),
            progress: dir.join("progress.json"),
        }
    }
}

fn compute_splits(n: usize, seed: u64) -> Splits {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_SEED_TAG));
    indices.shuffle(&mut rng);
    let n_train = n * 80 / 100;
    let n_val = n * 2 / 100;
    Splits {
        train: indices[..n_train].to_vec(),
        val: indices[n_train..n_train + n_val].to_vec(),
        test: indices[n_train + n_val..].to_vec(),
    }
}

fn field_stats(data: &[f64], sample_len: usize, indices: &[usize]) -> FieldStats {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &i in indices {
        for v in &data[i * sample_len..(i + 1) * sample_len] {
            sum += v;
            count += 1;
        }
    }
    let mean = sum / count as f64;
    let mut var = 0.0;
    for &i in indices {
        for v in &data[i * sample_len..(i + 1) * sample_len] {
            var += (v - mean) * (v - mean);
        }
    }
    let std = (var / count as f64).sqrt().max(1e-12);
    FieldStats { mean, std }
}

/// Generate (or resume generating) a dataset in `dir`.
///
/// Samples are produced in chunks; after each chunk the blobs are flushed
/// and `progress.json` updated, so an interrupted run restarts where it
/// stopped. A completed dataset is left untouched if the config matches.
pub fn generate_dataset(config: &DatasetConfig, dir: &Path) -> Result<DatasetMeta> {
    if config.n_samples < 1 {
        return Err(CoreError::invalid("n_samples must be >= 1"));
    }
    std::fs::create_dir_all(dir)?;
    let paths = DatasetPaths::new(dir);

    // Resume or start fresh.
    let mut completed = 0usize;
    if paths.meta.exists() {
        let existing: DatasetMeta =
            serde_json::from_reader(std::io::BufReader::new(File::open(&paths.meta)?))?;
        if existing.config != *config {
            return Err(CoreError::invalid(format!(
                "dataset at {} was generated with a different config",
                dir.display()
            )));
        }
        if !paths.progress.exists() {
            return Ok(existing); // already complete
        }
        let progress: Progress =
            serde_json::from_reader(std::io::BufReader::new(File::open(&paths.progress)?))?;
        completed = progress.completed;
    }

    let mesh = build_disk_mesh(config.mesh_rings, config.mesh_boundary)?;
    let ctx = FemContext::new(mesh);
    let n_b = ctx.mesh().n_boundary();
    let image_len = config.image_size * config.image_size;
    let meas_len = n_b * n_b;

    // Truncate any partial tail beyond the persisted progress counter.
    for (path, len) in [
        (&paths.sigma_true, image_len),
        (&paths.sigma_hat, image_len),
        (&paths.measurements, meas_len),
    ] {
        if completed == 0 {
            let _ = std::fs::remove_file(path);
        } else if path.exists() {
            let f = OpenOptions::new().write(true).open(path)?;
            f.set_len((completed * len * 8) as u64)?;
        } else {
            completed = 0;
        }
    }

    // Provisional meta (stats filled at the end) so resumes can validate.
    let provisional = DatasetMeta {
        config: config.clone(),
        n_boundary: n_b,
        n_elements: ctx.mesh().n_elements(),
        sigma_true_stats: FieldStats { mean: 0.0, std: 1.0 },
        sigma_hat_stats: FieldStats { mean: 0.0, std: 1.0 },
        measurement_stats: FieldStats { mean: 0.0, std: 1.0 },
    };
    write_json(&paths.meta, &provisional)?;

    let chunk = 16usize;
    let mut true_w = BufWriter::new(OpenOptions::new().create(true).append(true).open(&paths.sigma_true)?);
    let mut hat_w = BufWriter::new(OpenOptions::new().create(true).append(true).open(&paths.sigma_hat)?);
    let mut meas_w = BufWriter::new(OpenOptions::new().create(true).append(true).open(&paths.measurements)?);

    while completed < config.n_samples {
        let todo = chunk.min(config.n_samples - completed);
        let base = completed;
        let records: Vec<Result<SampleRecord>> =
            map_indexed(todo, |off| generate_sample(&ctx, config, base + off));
        for record in records {
            let record = record?;
            blob::write_f64_into(&mut true_w, &record.sigma_true)?;
            blob::write_f64_into(&mut hat_w, &record.sigma_hat)?;
            blob::write_f64_into(&mut meas_w, &record.measurement)?;
        }
        true_w.flush()?;
        hat_w.flush()?;
        meas_w.flush()?;
        completed += todo;
        write_json(&paths.progress, &Progress { completed })?;
    }
    drop((true_w, hat_w, meas_w));

    // Splits, statistics, final meta.
    let splits = compute_splits(config.n_samples, config.seed);
    write_json(&paths.splits, &splits)?;

    let sigma_true = blob::read_f64_file(&paths.sigma_true, Some(config.n_samples * image_len))?;
    let sigma_hat = blob::read_f64_file(&paths.sigma_hat, Some(config.n_samples * image_len))?;
    let measurements = blob::read_f64_file(&paths.measurements, Some(config.n_samples * meas_len))?;
    let meta = DatasetMeta {
        config: config.clone(),
        n_boundary: n_b,
        n_elements: ctx.mesh().n_elements(),
        sigma_true_stats: field_stats(&sigma_true, image_len, &splits.train),
        sigma_hat_stats: field_stats(&sigma_hat, image_len, &splits.train),
        measurement_stats: field_stats(&measurements, meas_len, &splits.train),
    };
    write_json(&paths.meta, &meta)?;
    std::fs::remove_file(&paths.progress)?;
    Ok(meta)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush()?;
    Ok(())
}

/// A dataset loaded into memory.
pub struct EitDataset {
    pub meta: DatasetMeta,
    pub splits: Splits,
    sigma_true: Vec<f64>,
    sigma_hat: Vec<f64>,
    measurements: Vec<f64>,
}

impl EitDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let paths = DatasetPaths::new(dir);
        if !paths.meta.exists() {
            return Err(CoreError::Format(format!(
                "no dataset at {} (meta.json missing)",
                dir.display()
            )));
        }
        if paths.progress.exists() {
            return Err(CoreError::Format(format!(
                "dataset at {} is incomplete (progress.json present)",
                dir.display()
            )));
        }
        let meta: DatasetMeta =
            serde_json::from_reader(std::io::BufReader::new(File::open(&paths.meta)?))?;
        let splits: Splits =
            serde_json::from_reader(std::io::BufReader::new(File::open(&paths.splits)?))?;
        let n = meta.config.n_samples;
        let image_len = meta.config.image_size * meta.config.image_size;
        let meas_len = meta.n_boundary * meta.n_boundary;
        Ok(EitDataset {
            sigma_true: blob::read_f64_file(&paths.sigma_true, Some(n * image_len))?,
            sigma_hat: blob::read_f64_file(&paths.sigma_hat, Some(n * image_len))?,
            measurements: blob::read_f64_file(&paths.measurements, Some(n * meas_len))?,
            meta,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.config.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.meta.config.image_size
    }

    pub fn sigma_true(&self, i: usize) -> &[f64] {
        let len = self.image_size() * self.image_size();
        &self.sigma_true[i * len..(i + 1) * len]
    }

    pub fn sigma_hat(&self, i: usize) -> &[f64] {
        let len = self.image_size() * self.image_size();
        &self.sigma_hat[i * len..(i + 1) * len]
    }

    pub fn measurement(&self, i: usize) -> &[f64] {
        let len = self.meta.n_boundary * self.meta.n_boundary;
        &self.measurements[i * len..(i + 1) * len]
    }

    pub fn measurement_matrix(&self, i: usize) -> Result<D2NMatrix> {
        let n = self.meta.n_boundary;
        let m = Array2::from_shape_vec((n, n), self.measurement(i).to_vec())
            .map_err(|e| CoreError::Format(format!("measurement shape: {e}")))?;
        D2NMatrix::new(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{compute_d2n, Conductivity};
    use crate::mesh::build_disk_mesh;

    fn tiny_config() -> DatasetConfig {
        DatasetConfig {
            distribution: Distribution::FourCircles,
            n_samples: 6,
            k_iters: 40,
            noise_level: 0.0,
            seed: 42,
            mesh_rings: 4,
            mesh_boundary: 16,
            image_size: 16,
            shepp_logan_perturbation: SheppLoganPerturbation::default(),
        }
    }

    #[test]
    fn noise_level_zero_is_identity() {
        let mesh = build_disk_mesh(3, 12).unwrap();
        let m = compute_d2n(&mesh, &Conductivity::constant(mesh.n_elements(), 1.0).unwrap())
            .unwrap();
        let noisy = add_noise(&m, 0.0, 7).unwrap();
        assert_eq!(noisy.matrix(), m.matrix());
    }

    #[test]
    fn noise_respects_level_and_symmetry() {
        let mesh = build_disk_mesh(4, 16).unwrap();
        let m = compute_d2n(&mesh, &Conductivity::constant(mesh.n_elements(), 2.0).unwrap())
            .unwrap();
        let noisy = add_noise(&m, 0.01, 3).unwrap();
        for (a, b) in noisy.matrix().iter().zip(m.matrix().iter()) {
            assert!((a - b).abs() <= 0.01 * b.abs() + 1e-15);
        }
        let asym = noisy.matrix() - &noisy.matrix().t();
        assert!(asym.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn uniform_noise_moments() {
        let level = 0.01;
        let factors = multiplicative_noise_matrix(1000, level, 99);
        let n = factors.len() as f64;
        let mean = factors.iter().sum::<f64>() / n;
        let var = factors.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let expected = level / 3.0_f64.sqrt();
        assert!((std - expected).abs() / expected < 0.01, "std {std} vs {expected}");
        assert!((mean - 1.0).abs() < 1e-4);
    }

    #[test]
    fn derive_seed_spreads() {
        let a = derive_seed(1, 0);
        let b = derive_seed(1, 1);
        let c = derive_seed(2, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn splits_are_proportional_and_disjoint() {
        let splits = compute_splits(500, 9);
        assert_eq!(splits.train.len(), 400);
        assert_eq!(splits.val.len(), 10);
        assert_eq!(splits.test.len(), 90);
        let mut all: Vec<usize> = splits
            .train
            .iter()
            .chain(&splits.val)
            .chain(&splits.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..500).collect::<Vec<_>>());
    }

    #[test]
    fn generation_is_deterministic_and_resumable() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = tiny_config();

        generate_dataset(&config, dir_a.path()).unwrap();
        generate_dataset(&config, dir_b.path()).unwrap();
        for name in ["sigma_true.f64", "sigma_hat.f64", "measurements.f64", "splits.json"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }

        // Simulate an interrupted run: truncate to 2 samples and restore the
        // progress marker, then resume and compare bytes.
        let paths = DatasetPaths::new(dir_b.path());
        let image_len = config.image_size * config.image_size * 8;
        let n_b = 16;
        for (path, len) in [
            (&paths.sigma_true, image_len),
            (&paths.sigma_hat, image_len),
            (&paths.measurements, n_b * n_b * 8),
        ] {
            let f = OpenOptions::new().write(true).open(path).unwrap();
            f.set_len((2 * len) as u64).unwrap();
        }
        write_json(&paths.progress, &Progress { completed: 2 }).unwrap();
        generate_dataset(&config, dir_b.path()).unwrap();
        for name in ["sigma_true.f64", "sigma_hat.f64", "measurements.f64"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after resume");
        }

        // Mismatched config is rejected.
        let mut other = config.clone();
        other.seed = 7;
        assert!(generate_dataset(&other, dir_a.path()).is_err());
    }

    #[test]
    fn loaded_dataset_exposes_samples_and_padding_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        generate_dataset(&config, dir.path()).unwrap();
        let ds = EitDataset::load(dir.path()).unwrap();
        assert_eq!(ds.len(), 6);
        let n = ds.image_size();
        for i in 0..ds.len() {
            for (idx, field) in [ds.sigma_true(i), ds.sigma_hat(i)].into_iter().enumerate() {
                for row in 0..n {
                    for col in 0..n {
                        let p = crate::raster::ImageGrid::pixel_center(n, row, col);
                        if p[0] * p[0] + p[1] * p[1] > 1.0 {
                            assert_eq!(
                                field[row * n + col],
                                1.0,
                                "sample {i} field {idx} pixel ({row},{col})"
                            );
                        }
                    }
                }
            }
        }
        // Noiseless data: the K-step reconstruction must fit the measurement
        // strictly better than the constant background for every sample
        // (background-only samples are already optimal and skipped).
        let mesh = build_disk_mesh(config.mesh_rings, config.mesh_boundary).unwrap();
        let ctx = FemContext::new(mesh);
        let ones = Conductivity::constant(ctx.mesh().n_elements(), 1.0).unwrap();
        for i in 0..ds.len() {
            let m_obs = ds.measurement_matrix(i).unwrap();
            let m_ones = ctx.forward(&ones).unwrap().into_d2n();
            let base = m_ones.rel_frobenius_distance(&m_obs);
            if base < 1e-12 {
                continue;
            }
            let (hat_mesh, _) = crate::inverse::reconstruction_operator(
                FemContext::new(ctx.mesh().clone()),
                &m_obs,
                config.k_iters,
            )
            .unwrap();
            let m_hat = ctx.forward(&hat_mesh).unwrap().into_d2n();
            let fitted = m_hat.rel_frobenius_distance(&m_obs);
            assert!(
                fitted < base,
                "sample {i}: reconstruction ({fitted:.3e}) no better than background ({base:.3e})"
            );
        }
    }
}
