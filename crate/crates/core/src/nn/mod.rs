//! Layers and architecture blocks.

mod attention;
mod hrnet;
mod residual;
mod split_attention;

pub use attention::{Mhsa, MhsaConfig, TransformerEncoderLayer};
pub use hrnet::{BasicBlock, HrFusion};
pub use residual::{BotBlock, Bottleneck, BottleneckConfig};
pub use split_attention::{radix_softmax, ResNeStBlock, SplitAttentionConv};

use crate::error::{dim_err, Result};
use crate::param::{join, ParamStore};
use crate::tensor::{Conv2dSpec, Real, Tensor};

/// Single-input layer.
pub trait Module<T: Real> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

/// `y = x·W + b` over the last dimension of a rank-2 or rank-3 input.
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Real> Linear<T> {
    pub fn new(store: &mut ParamStore<T>, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Linear {
            weight: store.weight(join(prefix, "weight"), &[in_dim, out_dim], in_dim)?,
            bias: store.zeros(join(prefix, "bias"), &[1, out_dim])?,
            in_dim,
            out_dim,
        })
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last != self.in_dim || !(2..=3).contains(&shape.len()) {
            return Err(dim_err!(
                "linear layer expects [.., {}] (rank 2 or 3), got {shape:?}",
                self.in_dim
            ));
        }
        let rows = x.numel() / self.in_dim;
        let y = x
            .reshape(&[rows, self.in_dim])?
            .matmul(&self.weight)?
            .add(&self.bias)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank ≥ 2") = self.out_dim;
        y.reshape(&out_shape)
    }
}

/// Convolution without bias (always followed by a normalization here).
pub struct Conv<T: Real> {
    pub weight: Tensor<T>,
    pub spec: Conv2dSpec,
}

impl<T: Real> Conv<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        if !in_ch.is_multiple_of(spec.groups) || !out_ch.is_multiple_of(spec.groups) {
            return Err(crate::Error::Config(format!(
                "{prefix}: channels {in_ch}->{out_ch} not divisible by {} groups",
                spec.groups
            )));
        }
        let cg = in_ch / spec.groups;
        let weight = store.weight(join(prefix, "weight"), &[out_ch, cg, kernel, kernel], cg * kernel * kernel)?;
        Ok(Conv { weight, spec })
    }

    /// `k×k` convolution with "same" padding for stride 1 and the given dilation.
    pub fn same(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let pad = dilation * (kernel - 1) / 2;
        Self::new(store, prefix, in_ch, out_ch, kernel, Conv2dSpec::new(stride, pad, dilation))
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<T: Real> Module<T> for Conv<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, self.spec)
    }
}

/// Number of normalization groups for `channels`: the largest of 8, 4, 2, 1
/// that leaves at least four channels per group (or 1 for tiny layers).
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2]
        .into_iter()
        .find(|&g| channels.is_multiple_of(g) && channels / g >= 4)
        .unwrap_or(1)
}

pub const NORM_EPS: f64 = 1e-5;

/// Batch-independent normalization for conv features (group norm with a
/// per-channel affine map).
pub struct Norm<T: Real> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub groups: usize,
}

impl<T: Real> Norm<T> {
    pub fn new(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.ones(join(prefix, "gain"), &[channels])?,
            bias: store.zeros(join(prefix, "bias"), &[channels])?,
            groups: norm_groups(channels),
        })
    }
}

impl<T: Real> Module<T> for Norm<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.group_norm(self.groups, &self.gain, &self.bias, NORM_EPS)
    }
}

pub struct LayerNorm<T: Real> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.ones(join(prefix, "gain"), &[dim])?,
            bias: store.zeros(join(prefix, "bias"), &[dim])?,
        })
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gain, &self.bias, NORM_EPS)
    }
}

/// Conv → norm → optional ReLU.
pub struct ConvNorm<T: Real> {
    pub conv: Conv<T>,
    pub norm: Norm<T>,
    pub relu: bool,
}

impl<T: Real> ConvNorm<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        relu: bool,
    ) -> Result<Self> {
        Ok(ConvNorm {
            conv: Conv::same(store, &join(prefix, "conv"), in_ch, out_ch, kernel, stride, dilation)?,
            norm: Norm::new(store, &join(prefix, "norm"), out_ch)?,
            relu,
        })
    }
}

impl<T: Real> Module<T> for ConvNorm<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.norm.forward(&self.conv.forward(x)?)?;
        Ok(if self.relu { y.relu() } else { y })
    }
}

/// Fully connected stack with ReLU between layers (none after the last).
pub struct Mlp<T: Real> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn new(store: &mut ParamStore<T>, prefix: &str, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &join(prefix, &format!("fc{i}")), d[0], d[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.iter().map(|l| l.in_dim).collect();
        d.extend(self.layers.last().map(|l| l.out_dim));
        d
    }
}

impl<T: Real> Module<T> for Mlp<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
pub(crate) fn zero_all<T: Real>(store: &ParamStore<T>, pred: impl Fn(&str) -> bool) {
    for p in store.params() {
        if pred(&p.name) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}
