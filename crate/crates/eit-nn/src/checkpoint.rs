//! Checkpoint format: a JSON manifest describing the architecture, schedule
//! state, and standardization statistics, beside a raw little-endian float32
//! parameter blob with named offsets. The manifest lives at the checkpoint
//! path, the blob next to it with extension `.f32`.

use std::io::{Read, Write};
use std::path::Path;

use eit_core::dataset::FieldStats;
use serde::{Deserialize, Serialize};

use crate::ddpm::{LossWeighting, NoiseSchedule};
use crate::error::{NnError, Result};
use crate::optim::LrSchedule;
use crate::params::ParamStore;
use crate::resnet::{InputMode, ResNetConfig, ResNetModel};
use crate::train::{TrainedDdpm, TrainedResnet};
use crate::unet::{UnetConfig, UnetModel};

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Resnet {
        config: ResNetConfig,
    },
    Ddpm {
        unet: UnetConfig,
        t_steps: usize,
        beta_start: f64,
        beta_end: f64,
        conditioning: InputMode,
        weighting: LossWeighting,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelSpec,
    /// Best-validation epoch the stored weights come from.
    pub epoch: usize,
    pub init_scheme: String,
    pub lr_schedule: LrSchedule,
    pub image_stats: FieldStats,
    pub cond_stats: FieldStats,
    pub params: Vec<ParamEntry>,
}

fn blob_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("f32")
}

fn write_blob(path: &Path, store: &ParamStore) -> Result<Vec<ParamEntry>> {
    let mut entries = Vec::with_capacity(store.len());
    let mut bytes = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in store.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            offset,
            len: tensor.len(),
            shape: tensor.shape().to_vec(),
        });
        for v in tensor.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        offset += tensor.len();
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(blob_path(path))?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(entries)
}

fn read_blob(path: &Path, manifest: &CheckpointManifest, store: &mut ParamStore) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(blob_path(path))?.read_to_end(&mut bytes)?;
    let total: usize = manifest.params.iter().map(|p| p.len).sum();
    if bytes.len() != total * 4 {
        return Err(NnError::Checkpoint(format!(
            "blob holds {} bytes, manifest expects {}",
            bytes.len(),
            total * 4
        )));
    }
    if manifest.params.len() != store.len() {
        return Err(NnError::Checkpoint(format!(
            "manifest has {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for (entry, id) in manifest.params.iter().zip(store.ids().collect::<Vec<_>>()) {
        if entry.name != store.name(id) || entry.shape != store.get(id).shape() {
            return Err(NnError::Checkpoint(format!(
                "parameter mismatch at '{}' (checkpoint '{}')",
                store.name(id),
                entry.name
            )));
        }
        let dst = store.get_mut(id).data_mut();
        for (j, v) in dst.iter_mut().enumerate() {
            let base = (entry.offset + j) * 4;
            let raw: [u8; 4] = bytes[base..base + 4].try_into().unwrap();
            *v = f32::from_le_bytes(raw) as f64;
        }
    }
    Ok(())
}

const INIT_SCHEME: &str = "kaiming_uniform_fan_in";

pub fn save_resnet(path: &Path, trained: &TrainedResnet) -> Result<()> {
    let params = write_blob(path, &trained.model.store)?;
    let manifest = CheckpointManifest {
        model: ModelSpec::Resnet {
            config: trained.model.config.clone(),
        },
        epoch: trained.epoch,
        init_scheme: INIT_SCHEME.into(),
        lr_schedule: trained.lr_schedule.clone(),
        image_stats: trained.image_stats.clone(),
        cond_stats: trained.cond_stats.clone(),
        params,
    };
    let w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(w, &manifest)?;
    Ok(())
}

pub fn save_ddpm(path: &Path, trained: &TrainedDdpm) -> Result<()> {
    let params = write_blob(path, &trained.model.store)?;
    let manifest = CheckpointManifest {
        model: ModelSpec::Ddpm {
            unet: trained.model.config.clone(),
            t_steps: trained.schedule.len(),
            beta_start: trained.beta_range.0,
            beta_end: trained.beta_range.1,
            conditioning: trained.conditioning,
            weighting: trained.weighting,
        },
        epoch: trained.epoch,
        init_scheme: INIT_SCHEME.into(),
        lr_schedule: trained.lr_schedule.clone(),
        image_stats: trained.image_stats.clone(),
        cond_stats: trained.cond_stats.clone(),
        params,
    };
    let w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(w, &manifest)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<CheckpointManifest> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

pub fn load_resnet(path: &Path) -> Result<TrainedResnet> {
    let manifest = load_manifest(path)?;
    let ModelSpec::Resnet { config } = &manifest.model else {
        return Err(NnError::Checkpoint("not a resnet checkpoint".into()));
    };
    let mut model = ResNetModel::new(config.clone(), 0)?;
    read_blob(path, &manifest, &mut model.store)?;
    Ok(TrainedResnet {
        model,
        image_stats: manifest.image_stats,
        cond_stats: manifest.cond_stats,
        epoch: manifest.epoch,
        lr_schedule: manifest.lr_schedule,
    })
}

pub fn load_ddpm(path: &Path) -> Result<TrainedDdpm> {
    let manifest = load_manifest(path)?;
    let ModelSpec::Ddpm {
        unet,
        t_steps,
        beta_start,
        beta_end,
        conditioning,
        weighting,
    } = &manifest.model
    else {
        return Err(NnError::Checkpoint("not a ddpm checkpoint".into()));
    };
    let mut model = UnetModel::new(unet.clone(), 0)?;
    read_blob(path, &manifest, &mut model.store)?;
    let schedule = if *t_steps == 1 {
        NoiseSchedule::from_betas(vec![*beta_start])?
    } else {
        NoiseSchedule::linear(*t_steps, *beta_start, *beta_end)?
    };
    Ok(TrainedDdpm {
        model,
        schedule,
        beta_range: (*beta_start, *beta_end),
        conditioning: *conditioning,
        weighting: *weighting,
        image_stats: manifest.image_stats,
        cond_stats: manifest.cond_stats,
        epoch: manifest.epoch,
        lr_schedule: manifest.lr_schedule,
    })
}
