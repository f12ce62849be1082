//! Reusable building blocks: convolutions, linear maps, group norm, and the
//! residual blocks both correction networks are made of.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Largest group count <= 8 dividing the channel count.
pub fn norm_groups(channels: usize) -> usize {
    for g in [8, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            kaiming_uniform(rng, &[c_out, c_in, k, k], c_in * k * k),
        );
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv2d { w, b, stride, pad }
    }

    /// Zero-initialized variant; the denoiser's output layer starts at zero
    /// so an untrained model predicts zero noise.
    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(format!("{name}.w"), Tensor::zeros(&[c_out, c_in, k, k]));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        f_in: usize,
        f_out: usize,
    ) -> Self {
        let w = store.register(format!("{name}.w"), kaiming_uniform(rng, &[f_out, f_in], f_in));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[f_out]));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.register(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(&[channels]));
        GroupNorm {
            gamma,
            beta,
            groups: norm_groups(channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Residual block `x + gn2(conv2(relu(gn1(conv1(x)))))`.
///
/// With `stride = 2` the block downsamples: `conv1` strides and the skip
/// path becomes a strided 1x1 projection.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1);
        let gn1 = GroupNorm::new(store, &format!("{name}.gn1"), c_out);
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1);
        let gn2 = GroupNorm::new(store, &format!("{name}.gn2"), c_out);
        let skip = if c_in != c_out || stride != 1 {
            Some(Conv2d::new(
                store,
                rng,
                &format!("{name}.skip"),
                c_in,
                c_out,
                1,
                stride,
                0,
            ))
        } else {
            None
        };
        ResBlock {
            conv1,
            gn1,
            conv2,
            gn2,
            skip,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = self.conv1.forward(g, x)?;
        let h = self.gn1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = self.gn2.forward(g, h)?;
        let shortcut = match &self.skip {
            Some(conv) => conv.forward(g, x)?,
            None => x,
        };
        g.add(shortcut, h)
    }
}

/// UNet residual block with a per-channel timestep injection between the two
/// convolutions.
#[derive(Debug, Clone)]
pub struct TimeResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl TimeResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        time_dim: usize,
    ) -> Self {
        let gn1 = GroupNorm::new(store, &format!("{name}.gn1"), c_in);
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1);
        let time_proj = Linear::new(store, rng, &format!("{name}.time"), time_dim, c_out);
        let gn2 = GroupNorm::new(store, &format!("{name}.gn2"), c_out);
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1);
        let skip = if c_in != c_out {
            Some(Conv2d::new(store, rng, &format!("{name}.skip"), c_in, c_out, 1, 1, 0))
        } else {
            None
        };
        TimeResBlock {
            gn1,
            conv1,
            time_proj,
            gn2,
            conv2,
            skip,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, time_emb: NodeId) -> Result<NodeId> {
        let h = self.gn1.forward(g, x)?;
        let h = g.relu(h);
        let h = self.conv1.forward(g, h)?;
        let t = self.time_proj.forward(g, time_emb)?;
        let h = g.add_channel_bias(h, t)?;
        let h = self.gn2.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let shortcut = match &self.skip {
            Some(conv) => conv.forward(g, x)?,
            None => x,
        };
        g.add(shortcut, h)
    }
}
