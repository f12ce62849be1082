//! Tape-based reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Graph`] records one forward pass as a flat list of nodes; parameters
//! enter as leaves referencing a shared read-only [`ParamStore`]. Calling
//! [`Graph::backward`] on a scalar loss walks the tape in reverse and
//! returns gradients keyed by parameter id. A graph is consumed by backward;
//! a second call is an error.
//!
//! Convolutions run as im2col plus one GEMM per pass (via ndarray's
//! matrixmultiply backend), with f64 accumulation throughout.

use ndarray::ArrayView2;

use crate::error::{NnError, Result};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct GroupNormSaved {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

enum Op {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sum(NodeId),
    AddChannelBias {
        x: NodeId,
        bias: NodeId,
    },
    ConcatChannels(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        saved: GroupNormSaved,
    },
    AvgPool {
        x: NodeId,
        k: usize,
    },
    UpsampleNearest {
        x: NodeId,
        factor: usize,
    },
    Reshape(NodeId),
    MseLoss {
        pred: NodeId,
        target: NodeId,
    },
    WeightedMseLoss {
        pred: NodeId,
        target: NodeId,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    consumed: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf (data, conditions, targets): no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// Parameter leaf; its gradient is accumulated by backward.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.store.get(id).clone();
        self.push(value, Op::Param(id), true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::Shape("mul: shape mismatch".into()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.value(x).data().iter().map(|v| c * v).collect();
        let t = Tensor::from_vec(self.value(x).shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Scale(x, c), needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::from_vec(self.value(x).shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Relu(x), needs)
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Broadcast-add a per-(batch, channel) bias onto a 4-d activation.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (bb, bc) = self.value(bias).dims2()?;
        if bb != b || bc != c {
            return Err(NnError::Shape(format!(
                "channel bias ({bb},{bc}) incompatible with activation ({b},{c},{h},{w})"
            )));
        }
        let hw = h * w;
        let mut data = self.value(x).data().to_vec();
        let bias_data = self.value(bias).data();
        for bi in 0..b {
            for ci in 0..c {
                let beta = bias_data[bi * c + ci];
                let base = (bi * c + ci) * hw;
                for v in &mut data[base..base + hw] {
                    *v += beta;
                }
            }
        }
        let t = Tensor::from_vec(self.value(x).shape(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddChannelBias { x, bias }, needs))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if ba != bb || ha != hb || wa != wb {
            return Err(NnError::Shape("concat: batch/spatial mismatch".into()));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity((ca + cb) * ba * hw);
        let da = self.value(a).data();
        let db = self.value(b).data();
        for bi in 0..ba {
            data.extend_from_slice(&da[bi * ca * hw..(bi + 1) * ca * hw]);
            data.extend_from_slice(&db[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let t = Tensor::from_vec(&[ba, ca + cb, ha, wa], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::ConcatChannels(a, b), needs))
    }

    /// 2-d cross-correlation with zero padding.
    ///
    /// `x` is (B, C_in, H, W), `w` is (C_out, C_in, k, k), `b` is (C_out).
    /// Output spatial size is `floor((H + 2 pad - k) / stride) + 1`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (bs, c_in, h, wd) = self.value(x).dims4()?;
        let wshape = self.value(w).shape().to_vec();
        let [c_out, wc_in, kh, kw] = match wshape[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(NnError::Shape("conv2d: weights must be 4-d".into())),
        };
        if wc_in != c_in {
            return Err(NnError::Shape(format!(
                "conv2d: input has {c_in} channels, weights expect {wc_in}"
            )));
        }
        if kh != kw {
            return Err(NnError::Shape("conv2d: only square kernels".into()));
        }
        if self.value(b).shape() != [c_out] {
            return Err(NnError::Shape("conv2d: bias must be (C_out)".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(NnError::Shape("conv2d: kernel larger than padded input".into()));
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (wd + 2 * pad - kw) / stride + 1;

        let cols = im2col(self.value(x), kh, stride, pad, h_out, w_out);
        let ckk = c_in * kh * kw;
        let n_cols = bs * h_out * w_out;
        let w_mat = ArrayView2::from_shape((c_out, ckk), self.value(w).data())
            .map_err(|e| NnError::Shape(e.to_string()))?;
        let col_mat =
            ArrayView2::from_shape((ckk, n_cols), &cols[..]).map_err(|e| NnError::Shape(e.to_string()))?;
        let y_mat = w_mat.dot(&col_mat); // (C_out, B*H_out*W_out)

        let mut data = vec![0.0; bs * c_out * h_out * w_out];
        let bias = self.value(b).data().to_vec();
        let hw = h_out * w_out;
        for bi in 0..bs {
            for co in 0..c_out {
                let beta = bias[co];
                let dst = (bi * c_out + co) * hw;
                for p in 0..hw {
                    data[dst + p] = y_mat[[co, bi * hw + p]] + beta;
                }
            }
        }
        let t = Tensor::from_vec(&[bs, c_out, h_out, w_out], data)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            needs,
        ))
    }

    /// `y = x W^T + b` with `x` (B, F_in), `w` (F_out, F_in), `b` (F_out).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (bs, f_in) = self.value(x).dims2()?;
        let (f_out, wf_in) = self.value(w).dims2()?;
        if wf_in != f_in {
            return Err(NnError::Shape(format!(
                "linear: input features {f_in}, weights expect {wf_in}"
            )));
        }
        if self.value(b).shape() != [f_out] {
            return Err(NnError::Shape("linear: bias must be (F_out)".into()));
        }
        let x_mat = ArrayView2::from_shape((bs, f_in), self.value(x).data()).unwrap();
        let w_mat = ArrayView2::from_shape((f_out, f_in), self.value(w).data()).unwrap();
        let y = x_mat.dot(&w_mat.t()); // (B, F_out)
        let bias = self.value(b).data();
        let mut data = vec![0.0; bs * f_out];
        for bi in 0..bs {
            for fo in 0..f_out {
                data[bi * f_out + fo] = y[[bi, fo]] + bias[fo];
            }
        }
        let t = Tensor::from_vec(&[bs, f_out], data)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(t, Op::Linear { x, w, b }, needs))
    }

    /// Group normalization over channel groups with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    ) -> Result<NodeId> {
        let (bs, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(NnError::Shape(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(NnError::Shape("group_norm: affine params must be (C)".into()));
        }
        const EPS: f64 = 1e-5;
        let cg = c / groups;
        let group_len = cg * h * w;
        let xd = self.value(x).data();
        let mut normalized = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; bs * groups];
        for bi in 0..bs {
            for g in 0..groups {
                let base = bi * c * h * w + g * group_len;
                let slice = &xd[base..base + group_len];
                let mean = slice.iter().sum::<f64>() / group_len as f64;
                let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / group_len as f64;
                let istd = 1.0 / (var + EPS).sqrt();
                inv_std[bi * groups + g] = istd;
                for (i, v) in slice.iter().enumerate() {
                    normalized[base + i] = (v - mean) * istd;
                }
            }
        }
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let hw = h * w;
        let mut data = vec![0.0; xd.len()];
        for bi in 0..bs {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for i in 0..hw {
                    data[base + i] = gam[ci] * normalized[base + i] + bet[ci];
                }
            }
        }
        let t = Tensor::from_vec(self.value(x).shape(), data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved: GroupNormSaved {
                    normalized,
                    inv_std,
                },
            },
            needs,
        ))
    }

    /// Non-overlapping k x k average pooling.
    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (bs, c, h, w) = self.value(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(NnError::Shape(format!(
                "avg_pool: {h}x{w} not divisible by window {k}"
            )));
        }
        let (ho, wo) = (h / k, w / k);
        let xd = self.value(x).data();
        let mut data = vec![0.0; bs * c * ho * wo];
        let inv = 1.0 / (k * k) as f64;
        for bi in 0..bs {
            for ci in 0..c {
                let src = (bi * c + ci) * h * w;
                let dst = (bi * c + ci) * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += xd[src + (oy * k + dy) * w + ox * k + dx];
                            }
                        }
                        data[dst + oy * wo + ox] = acc * inv;
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[bs, c, ho, wo], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::AvgPool { x, k }, needs))
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let (bs, c, h, w) = self.value(x).dims4()?;
        if factor == 0 {
            return Err(NnError::Shape("upsample: factor must be >= 1".into()));
        }
        let (ho, wo) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut data = vec![0.0; bs * c * ho * wo];
        for bi in 0..bs {
            for ci in 0..c {
                let src = (bi * c + ci) * h * w;
                let dst = (bi * c + ci) * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        data[dst + oy * wo + ox] = xd[src + (oy / factor) * w + ox / factor];
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[bs, c, ho, wo], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::UpsampleNearest { x, factor }, needs))
    }

    /// Reinterpret the element buffer with a new shape (same length).
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Mean squared error over all elements, as a scalar node.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(NnError::Shape("mse: shape mismatch".into()));
        }
        let n = self.value(pred).len() as f64;
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(loss), Op::MseLoss { pred, target }, needs))
    }

    /// Mean squared error with one weight per leading-dimension item:
    /// `(1/numel) sum_b w_b sum_i (pred - target)^2`. With unit weights this
    /// equals [`Graph::mse_loss`].
    pub fn weighted_mse_loss(
        &mut self,
        pred: NodeId,
        target: NodeId,
        weights: Vec<f64>,
    ) -> Result<NodeId> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(NnError::Shape("weighted mse: shape mismatch".into()));
        }
        let b = *self
            .value(pred)
            .shape()
            .first()
            .ok_or_else(|| NnError::Shape("weighted mse needs a batch dimension".into()))?;
        if weights.len() != b {
            return Err(NnError::Shape(format!(
                "{} weights for batch of {b}",
                weights.len()
            )));
        }
        let total = self.value(pred).len();
        let item = total / b;
        let mut loss = 0.0;
        for bi in 0..b {
            let mut acc = 0.0;
            for i in bi * item..(bi + 1) * item {
                let d = self.value(pred).data()[i] - self.value(target).data()[i];
                acc += d * d;
            }
            loss += weights[bi] * acc;
        }
        loss /= total as f64;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedMseLoss {
                pred,
                target,
                weights,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar loss node. Returns parameter gradients and
    /// consumes the graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradStore> {
        if self.consumed {
            return Err(NnError::Graph(
                "backward called twice on the same graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(NnError::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.value(loss).assert_finite("loss")?;
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = GradStore::zeros_like(self.store);

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(pid) => {
                    let acc = out.get_mut(*pid);
                    for (a, g) in acc.data_mut().iter_mut().zip(gy.data()) {
                        *a += g;
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.push_grad(&mut grads, a, gy.clone());
                    self.push_grad(&mut grads, b, gy);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = mul_elem(gy.data(), self.nodes[b.0].value.data());
                    let gb = mul_elem(gy.data(), self.nodes[a.0].value.data());
                    self.push_grad_vec(&mut grads, a, ga);
                    self.push_grad_vec(&mut grads, b, gb);
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    let g = gy.data().iter().map(|v| c * v).collect();
                    self.push_grad_vec(&mut grads, x, g);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let g = gy
                        .data()
                        .iter()
                        .zip(self.nodes[idx].value.data())
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.push_grad_vec(&mut grads, x, g);
                }
                Op::Sum(x) => {
                    let x = *x;
                    let g0 = gy.data()[0];
                    let g = vec![g0; self.nodes[x.0].value.len()];
                    self.push_grad_vec(&mut grads, x, g);
                }
                Op::AddChannelBias { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let (b, c, h, w) = self.nodes[x.0].value.dims4()?;
                    let hw = h * w;
                    let mut gb = vec![0.0; b * c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            gb[bi * c + ci] = gy.data()[base..base + hw].iter().sum();
                        }
                    }
                    self.push_grad(&mut grads, x, gy);
                    self.push_grad_vec(&mut grads, bias, gb);
                }
                Op::ConcatChannels(a, b) => {
                    let (a, b) = (*a, *b);
                    let (ba, ca, h, w) = self.nodes[a.0].value.dims4()?;
                    let (_, cb, _, _) = self.nodes[b.0].value.dims4()?;
                    let hw = h * w;
                    let mut ga = vec![0.0; ba * ca * hw];
                    let mut gb = vec![0.0; ba * cb * hw];
                    let stride = (ca + cb) * hw;
                    for bi in 0..ba {
                        let src = bi * stride;
                        ga[bi * ca * hw..(bi + 1) * ca * hw]
                            .copy_from_slice(&gy.data()[src..src + ca * hw]);
                        gb[bi * cb * hw..(bi + 1) * cb * hw]
                            .copy_from_slice(&gy.data()[src + ca * hw..src + stride]);
                    }
                    self.push_grad_vec(&mut grads, a, ga);
                    self.push_grad_vec(&mut grads, b, gb);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let (bs, c_in, h, wd) = self.nodes[x.0].value.dims4()?;
                    let (_, c_out, h_out, w_out) = self.nodes[idx].value.dims4()?;
                    let k = self.nodes[w.0].value.shape()[2];
                    let ckk = c_in * k * k;
                    let hw = h_out * w_out;
                    let n_cols = bs * hw;

                    // dY as (C_out, B*H_out*W_out)
                    let mut gy_mat = vec![0.0; c_out * n_cols];
                    for bi in 0..bs {
                        for co in 0..c_out {
                            let src = (bi * c_out + co) * hw;
                            let dst = co * n_cols + bi * hw;
                            gy_mat[dst..dst + hw].copy_from_slice(&gy.data()[src..src + hw]);
                        }
                    }
                    let gy_view = ArrayView2::from_shape((c_out, n_cols), &gy_mat[..]).unwrap();

                    if self.nodes[w.0].needs_grad {
                        let col_view = ArrayView2::from_shape((ckk, n_cols), &cols[..]).unwrap();
                        let gw = gy_view.dot(&col_view.t()); // (C_out, CKK)
                        let gw_flat: Vec<f64> = gw.iter().copied().collect();
                        self.push_grad_vec(&mut grads, w, gw_flat);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut gb = vec![0.0; c_out];
                        for co in 0..c_out {
                            gb[co] = gy_mat[co * n_cols..(co + 1) * n_cols].iter().sum();
                        }
                        self.push_grad_vec(&mut grads, b, gb);
                    }
                    if self.nodes[x.0].needs_grad {
                        let w_view =
                            ArrayView2::from_shape((c_out, ckk), self.nodes[w.0].value.data())
                                .unwrap();
                        let gcols = w_view.t().dot(&gy_view); // (CKK, n_cols)
                        let gx = col2im(
                            gcols.as_slice().unwrap(),
                            bs,
                            c_in,
                            h,
                            wd,
                            k,
                            stride,
                            pad,
                            h_out,
                            w_out,
                        );
                        self.push_grad_vec(&mut grads, x, gx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (bs, f_in) = self.nodes[x.0].value.dims2()?;
                    let (f_out, _) = self.nodes[w.0].value.dims2()?;
                    let gy_view = ArrayView2::from_shape((bs, f_out), gy.data()).unwrap();
                    if self.nodes[w.0].needs_grad {
                        let x_view =
                            ArrayView2::from_shape((bs, f_in), self.nodes[x.0].value.data())
                                .unwrap();
                        let gw = gy_view.t().dot(&x_view); // (F_out, F_in)
                        self.push_grad_vec(&mut grads, w, gw.iter().copied().collect());
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut gb = vec![0.0; f_out];
                        for bi in 0..bs {
                            for fo in 0..f_out {
                                gb[fo] += gy.data()[bi * f_out + fo];
                            }
                        }
                        self.push_grad_vec(&mut grads, b, gb);
                    }
                    if self.nodes[x.0].needs_grad {
                        let w_view =
                            ArrayView2::from_shape((f_out, f_in), self.nodes[w.0].value.data())
                                .unwrap();
                        let gx = gy_view.dot(&w_view); // (B, F_in)
                        self.push_grad_vec(&mut grads, x, gx.iter().copied().collect());
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    saved,
                } => {
                    let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                    let (bs, c, h, w) = self.nodes[x.0].value.dims4()?;
                    let hw = h * w;
                    let cg = c / groups;
                    let group_len = cg * hw;
                    let gam = self.nodes[gamma.0].value.data();

                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for bi in 0..bs {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            for i in 0..hw {
                                ggamma[ci] += gy.data()[base + i] * saved.normalized[base + i];
                                gbeta[ci] += gy.data()[base + i];
                            }
                        }
                    }

                    let mut gx = vec![0.0; bs * c * hw];
                    for bi in 0..bs {
                        for g in 0..groups {
                            let base = bi * c * hw + g * group_len;
                            let istd = saved.inv_std[bi * groups + g];
                            // dxhat = gy * gamma (per channel)
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for i in 0..group_len {
                                let ci = g * cg + i / hw;
                                let dxh = gy.data()[base + i] * gam[ci];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * saved.normalized[base + i];
                            }
                            let n = group_len as f64;
                            for i in 0..group_len {
                                let ci = g * cg + i / hw;
                                let dxh = gy.data()[base + i] * gam[ci];
                                gx[base + i] = istd
                                    * (dxh
                                        - sum_dxhat / n
                                        - saved.normalized[base + i] * sum_dxhat_xhat / n);
                            }
                        }
                    }
                    self.push_grad_vec(&mut grads, x, gx);
                    self.push_grad_vec(&mut grads, gamma, ggamma);
                    self.push_grad_vec(&mut grads, beta, gbeta);
                }
                Op::AvgPool { x, k } => {
                    let (x, k) = (*x, *k);
                    let (bs, c, h, w) = self.nodes[x.0].value.dims4()?;
                    let (ho, wo) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f64;
                    let mut gx = vec![0.0; bs * c * h * w];
                    for bi in 0..bs {
                        for ci in 0..c {
                            let src = (bi * c + ci) * ho * wo;
                            let dst = (bi * c + ci) * h * w;
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let g = gy.data()[src + oy * wo + ox] * inv;
                                    for dy in 0..k {
                                        for dx in 0..k {
                                            gx[dst + (oy * k + dy) * w + ox * k + dx] += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.push_grad_vec(&mut grads, x, gx);
                }
                Op::UpsampleNearest { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    let (bs, c, h, w) = self.nodes[x.0].value.dims4()?;
                    let (ho, wo) = (h * factor, w * factor);
                    let mut gx = vec![0.0; bs * c * h * w];
                    for bi in 0..bs {
                        for ci in 0..c {
                            let src = (bi * c + ci) * ho * wo;
                            let dst = (bi * c + ci) * h * w;
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    gx[dst + (oy / factor) * w + ox / factor] +=
                                        gy.data()[src + oy * wo + ox];
                                }
                            }
                        }
                    }
                    self.push_grad_vec(&mut grads, x, gx);
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let g = gy.data().to_vec();
                    self.push_grad_vec(&mut grads, x, g);
                }
                Op::MseLoss { pred, target } => {
                    let (pred, target) = (*pred, *target);
                    let n = self.nodes[pred.0].value.len() as f64;
                    let g0 = gy.data()[0];
                    let gp: Vec<f64> = self.nodes[pred.0]
                        .value
                        .data()
                        .iter()
                        .zip(self.nodes[target.0].value.data())
                        .map(|(a, b)| 2.0 * (a - b) / n * g0)
                        .collect();
                    if self.nodes[target.0].needs_grad {
                        let gt: Vec<f64> = gp.iter().map(|v| -v).collect();
                        self.push_grad_vec(&mut grads, target, gt);
                    }
                    self.push_grad_vec(&mut grads, pred, gp);
                }
                Op::WeightedMseLoss {
                    pred,
                    target,
                    weights,
                } => {
                    let (pred, target) = (*pred, *target);
                    let total = self.nodes[pred.0].value.len();
                    let item = total / weights.len();
                    let g0 = gy.data()[0];
                    let gp: Vec<f64> = self.nodes[pred.0]
                        .value
                        .data()
                        .iter()
                        .zip(self.nodes[target.0].value.data())
                        .enumerate()
                        .map(|(i, (a, b))| {
                            2.0 * weights[i / item] * (a - b) / total as f64 * g0
                        })
                        .collect();
                    if self.nodes[target.0].needs_grad {
                        let gt: Vec<f64> = gp.iter().map(|v| -v).collect();
                        self.push_grad_vec(&mut grads, target, gt);
                    }
                    self.push_grad_vec(&mut grads, pred, gp);
                }
            }
        }
        Ok(out)
    }

    fn push_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn push_grad_vec(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Vec<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot => {
                let shape = self.nodes[id.0].value.shape().to_vec();
                *slot = Some(Tensor::from_vec(&shape, g).expect("gradient shape"));
            }
        }
    }
}

fn mul_elem(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Unfold padded patches of `x` into a (C*k*k, B*H_out*W_out) matrix.
fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize, h_out: usize, w_out: usize) -> Vec<f64> {
    let (bs, c, h, w) = x.dims4().expect("conv input is 4-d");
    let ckk = c * k * k;
    let hw_out = h_out * w_out;
    let n_cols = bs * hw_out;
    let mut cols = vec![0.0; ckk * n_cols];
    let xd = x.data();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * n_cols;
                for bi in 0..bs {
                    let src_base = (bi * c + ci) * h * w;
                    let col_base = row_base + bi * hw_out;
                    for oy in 0..h_out {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        for ox in 0..w_out {
                            let ix = ox * stride + kx;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            let ix = ix - pad;
                            cols[col_base + oy * w_out + ox] = xd[src_base + iy * w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column matrix back to input layout (adjoint of [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    bs: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<f64> {
    let hw_out = h_out * w_out;
    let n_cols = bs * hw_out;
    let mut x = vec![0.0; bs * c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * n_cols;
                for bi in 0..bs {
                    let dst_base = (bi * c + ci) * h * w;
                    let col_base = row_base + bi * hw_out;
                    for oy in 0..h_out {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        for ox in 0..w_out {
                            let ix = ox * stride + kx;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            let ix = ix - pad;
                            x[dst_base + iy * w + ix] += cols[col_base + oy * w_out + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Sinusoidal timestep embedding: for embedding width `dim` (even), entry
/// pairs are `(sin(t w_i), cos(t w_i))` with geometrically spaced `w_i`.
pub fn sinusoidal_time_embedding(timesteps: &[usize], dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "embedding width must be even");
    let half = dim / 2;
    let mut data = vec![0.0; timesteps.len() * dim];
    for (bi, &t) in timesteps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
            let angle = t as f64 * freq;
            data[bi * dim + 2 * i] = angle.sin();
            data[bi * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::from_vec(&[timesteps.len(), dim], data).expect("embedding shape")
}
