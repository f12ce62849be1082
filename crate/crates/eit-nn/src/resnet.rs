//! The ResNet correction operator: residual blocks interleaved with
//! downsampling blocks, finished by one fully-connected layer that maps the
//! flattened feature map back to the input resolution.
//!
//! The direct-learning baseline uses the identical architecture and differs
//! only in what the input channel carries (the measurement resized to the
//! image grid instead of the truncated-L-BFGS estimate).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Conv2d, GroupNorm, Linear, ResBlock};
use crate::params::ParamStore;

/// What the single input channel carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Truncated L-BFGS reconstruction (correction operator).
    InitialGuess,
    /// Measurement matrix resized to the image grid (direct baseline).
    DirectMeasurement,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResNetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub n_down_blocks: usize,
    pub input_mode: InputMode,
}

impl ResNetConfig {
    fn validate(&self) -> Result<()> {
        if self.n_res_blocks < 1 {
            return Err(NnError::Shape("n_res_blocks must be >= 1".into()));
        }
        if self.image_size % (1 << self.n_down_blocks) != 0 {
            return Err(NnError::Shape(format!(
                "image size {} not divisible by 2^{}",
                self.image_size, self.n_down_blocks
            )));
        }
        Ok(())
    }
}

pub struct ResNetModel {
    pub config: ResNetConfig,
    pub store: ParamStore,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    head_norm: GroupNorm,
    fc: Linear,
}

impl ResNetModel {
    /// Deterministic construction: parameters are registered and initialized
    /// in a fixed order from `seed`.
    pub fn new(config: ResNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::new(&mut store, &mut rng, "stem", 1, config.base_channels, 3, 1, 1);

        let mut blocks = Vec::new();
        let mut ch = config.base_channels;
        for i in 0..config.n_res_blocks {
            blocks.push(ResBlock::new(
                &mut store,
                &mut rng,
                &format!("res{i}"),
                ch,
                ch,
                1,
            ));
            if i < config.n_down_blocks {
                blocks.push(ResBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("down{i}"),
                    ch,
                    ch * 2,
                    2,
                ));
                ch *= 2;
            }
        }
        let head_norm = GroupNorm::new(&mut store, "head_norm", ch);
        let spatial = config.image_size >> config.n_down_blocks;
        let features = ch * spatial * spatial;
        let out = config.image_size * config.image_size;
        let fc = Linear::new(&mut store, &mut rng, "fc", features, out);
        Ok(ResNetModel {
            config,
            store,
            stem,
            blocks,
            head_norm,
            fc,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.total_parameters()
    }

    /// Forward pass on standardized images: input and output are
    /// (B, 1, n, n).
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = g.value(x).dims4()?;
        let n = self.config.image_size;
        if c != 1 || h != n || w != n {
            return Err(NnError::Shape(format!(
                "expected (B,1,{n},{n}) input, got ({b},{c},{h},{w})"
            )));
        }
        let mut h = self.stem.forward(g, x)?;
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        let h = self.head_norm.forward(g, h)?;
        let h = g.relu(h);
        let (bs, ch, sh, sw) = g.value(h).dims4()?;
        let flat = g.reshape(h, &[bs, ch * sh * sw])?;
        let out = self.fc.forward(g, flat)?;
        g.reshape(out, &[bs, 1, n, n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn desk_config() -> ResNetConfig {
        ResNetConfig {
            image_size: 16,
            base_channels: 8,
            n_res_blocks: 3,
            n_down_blocks: 1,
            input_mode: InputMode::InitialGuess,
        }
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let model = ResNetModel::new(desk_config(), 0).unwrap();
        let mut g = Graph::new(&model.store);
        let x = g.input(Tensor::zeros(&[3, 1, 16, 16]));
        let y = model.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 1, 16, 16]);
        let bad = g.input(Tensor::zeros(&[1, 1, 8, 8]));
        assert!(model.forward(&mut g, bad).is_err());
    }

    #[test]
    fn zeroed_final_layer_outputs_constant_bias() {
        let mut model = ResNetModel::new(desk_config(), 1).unwrap();
        let w = model.fc.w;
        let b = model.fc.b;
        for v in model.store.get_mut(w).data_mut() {
            *v = 0.0;
        }
        let bias = 0.375;
        for v in model.store.get_mut(b).data_mut() {
            *v = bias;
        }
        let mut g = Graph::new(&model.store);
        let x = g.input(Tensor::from_vec(
            &[1, 1, 16, 16],
            (0..256).map(|i| i as f64 * 0.01).collect(),
        ).unwrap());
        let y = model.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - bias).abs() < 1e-12));
    }

    #[test]
    fn param_count_is_config_deterministic() {
        let a = ResNetModel::new(desk_config(), 0).unwrap();
        let b = ResNetModel::new(desk_config(), 99).unwrap();
        assert_eq!(a.param_count(), b.param_count());

        // Paper-scale configuration lands in the 1e7 parameter decade.
        let paper = ResNetConfig {
            image_size: 64,
            base_channels: 16,
            n_res_blocks: 8,
            n_down_blocks: 4,
            input_mode: InputMode::InitialGuess,
        };
        let model = ResNetModel::new(paper, 0).unwrap();
        let count = model.param_count();
        assert!(
            (5_000_000..50_000_000).contains(&count),
            "paper-scale parameter count {count}"
        );
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let model = ResNetModel::new(desk_config(), 7).unwrap();
        let mut g = Graph::new(&model.store);
        let x = g.input(Tensor::from_vec(
            &[2, 1, 16, 16],
            (0..512).map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.5).collect(),
        ).unwrap());
        let y = model.forward(&mut g, x).unwrap();
        let target = g.input(Tensor::full(&[2, 1, 16, 16], 0.25));
        let loss = g.mse_loss(y, target).unwrap();
        let grads = g.backward(loss).unwrap();
        for id in model.store.ids() {
            let nonzero = grads.get(id).data().iter().any(|v| *v != 0.0);
            assert!(nonzero, "parameter {} has an all-zero gradient", model.store.name(id));
        }
    }
}
