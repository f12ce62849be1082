//! UNet denoiser without attention: three-ish resolution levels with skip
//! connections, group normalization, and sinusoidal timestep embeddings
//! injected into every residual block. Conditioning enters as an extra input
//! channel concatenated with the noisy image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{sinusoidal_time_embedding, Graph, NodeId};
use crate::layers::{Conv2d, GroupNorm, Linear, TimeResBlock};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UnetConfig {
    pub image_size: usize,
    /// Noisy image plus conditioning channels (2 for one condition image).
    pub in_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level; the length fixes the level
    /// count (each level after the first halves the resolution).
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
}

impl UnetConfig {
    fn validate(&self) -> Result<()> {
        let levels = self.channel_mults.len();
        if levels < 2 {
            return Err(NnError::Shape("need at least two resolution levels".into()));
        }
        if self.image_size % (1 << (levels - 1)) != 0 {
            return Err(NnError::Shape(format!(
                "image size {} not divisible by 2^{}",
                self.image_size,
                levels - 1
            )));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(NnError::Shape("time embedding width must be even".into()));
        }
        if self.blocks_per_level < 1 {
            return Err(NnError::Shape("blocks_per_level must be >= 1".into()));
        }
        Ok(())
    }

    fn level_channels(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }
}

struct DownLevel {
    blocks: Vec<TimeResBlock>,
    downsample: Option<Conv2d>,
}

struct UpLevel {
    post_up: Conv2d,
    blocks: Vec<TimeResBlock>,
}

pub struct UnetModel {
    pub config: UnetConfig,
    pub store: ParamStore,
    time_mlp1: Linear,
    time_mlp2: Linear,
    stem: Conv2d,
    down: Vec<DownLevel>,
    mid: TimeResBlock,
    up: Vec<UpLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UnetModel {
    pub fn new(config: UnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = config.time_embed_dim;
        let hidden = emb * 2;
        let time_mlp1 = Linear::new(&mut store, &mut rng, "time_mlp1", emb, hidden);
        let time_mlp2 = Linear::new(&mut store, &mut rng, "time_mlp2", hidden, hidden);

        let chans = config.level_channels();
        let stem = Conv2d::new(&mut store, &mut rng, "stem", config.in_channels, chans[0], 3, 1, 1);

        let mut down = Vec::new();
        for (lvl, &ch) in chans.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..config.blocks_per_level {
                blocks.push(TimeResBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("down{lvl}.block{bi}"),
                    ch,
                    ch,
                    hidden,
                ));
            }
            let downsample = if lvl + 1 < chans.len() {
                Some(Conv2d::new(
                    &mut store,
                    &mut rng,
                    &format!("down{lvl}.pool"),
                    ch,
                    chans[lvl + 1],
                    3,
                    2,
                    1,
                ))
            } else {
                None
            };
            down.push(DownLevel { blocks, downsample });
        }

        let bottom = *chans.last().unwrap();
        let mid = TimeResBlock::new(&mut store, &mut rng, "mid", bottom, bottom, hidden);

        let mut up = Vec::new();
        for lvl in (0..chans.len() - 1).rev() {
            let (from, to) = (chans[lvl + 1], chans[lvl]);
            let post_up = Conv2d::new(
                &mut store,
                &mut rng,
                &format!("up{lvl}.conv"),
                from,
                to,
                3,
                1,
                1,
            );
            let mut blocks = Vec::new();
            for bi in 0..config.blocks_per_level {
                let c_in = if bi == 0 { to * 2 } else { to };
                blocks.push(TimeResBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("up{lvl}.block{bi}"),
                    c_in,
                    to,
                    hidden,
                ));
            }
            up.push(UpLevel { post_up, blocks });
        }

        let out_norm = GroupNorm::new(&mut store, "out_norm", chans[0]);
        let out_conv = Conv2d::zeroed(&mut store, "out_conv", chans[0], 1, 3, 1, 1);
        Ok(UnetModel {
            config,
            store,
            time_mlp1,
            time_mlp2,
            stem,
            down,
            mid,
            up,
            out_norm,
            out_conv,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.total_parameters()
    }

    /// Predict noise for a batch: `x` is (B, in_channels, n, n) with the
    /// conditioning already concatenated; `timesteps` holds one (1-based)
    /// step per batch item.
    pub fn forward(&self, g: &mut Graph, x: NodeId, timesteps: &[usize]) -> Result<NodeId> {
        let (b, c, h, w) = g.value(x).dims4()?;
        let n = self.config.image_size;
        if c != self.config.in_channels || h != n || w != n {
            return Err(NnError::Shape(format!(
                "expected (B,{},{n},{n}) input, got ({b},{c},{h},{w})",
                self.config.in_channels
            )));
        }
        if timesteps.len() != b {
            return Err(NnError::Shape("one timestep per batch item".into()));
        }
        let emb = g.input(sinusoidal_time_embedding(
            timesteps,
            self.config.time_embed_dim,
        ));
        let t = self.time_mlp1.forward(g, emb)?;
        let t = g.relu(t);
        let t = self.time_mlp2.forward(g, t)?;
        let temb = g.relu(t);

        let mut h = self.stem.forward(g, x)?;
        let mut skips = Vec::new();
        for (lvl, level) in self.down.iter().enumerate() {
            for block in &level.blocks {
                h = block.forward(g, h, temb)?;
            }
            if level.downsample.is_some() {
                skips.push(h);
            }
            if let Some(downsample) = &level.downsample {
                h = downsample.forward(g, h)?;
            }
            let _ = lvl;
        }
        h = self.mid.forward(g, h, temb)?;
        for level in &self.up {
            h = g.upsample_nearest(h, 2)?;
            h = level.post_up.forward(g, h)?;
            let skip = skips.pop().expect("one skip per up level");
            h = g.concat_channels(h, skip)?;
            for block in &level.blocks {
                h = block.forward(g, h, temb)?;
            }
        }
        let h = self.out_norm.forward(g, h)?;
        let h = g.relu(h);
        self.out_conv.forward(g, h)
    }

    /// Convenience single-pass prediction outside a training graph.
    pub fn predict(&self, x: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let xin = g.input(x.clone());
        let y = self.forward(&mut g, xin, timesteps)?;
        Ok(g.value(y).clone())
    }
}
