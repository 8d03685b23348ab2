use super::{Conv, ConvNorm, Mhsa, MhsaConfig, Module, Norm};
use crate::error::{dim_err, Result};
use crate::param::{join, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckConfig {
    pub in_ch: usize,
    pub mid_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl BottleneckConfig {
    pub fn new(in_ch: usize, mid_ch: usize, out_ch: usize, stride: usize) -> Self {
        BottleneckConfig {
            in_ch,
            mid_ch,
            out_ch,
            stride,
            dilation: 1,
        }
    }

    pub fn dilated(self, dilation: usize) -> Self {
        BottleneckConfig { dilation, ..self }
    }

    fn needs_projection(&self) -> bool {
        self.stride != 1 || self.in_ch != self.out_ch
    }
}

/// 1×1 projection (+ norm) used when a residual block changes shape.
struct Shortcut<T: Real> {
    proj: Option<(Conv<T>, Norm<T>)>,
}

impl<T: Real> Shortcut<T> {
    fn new(store: &mut ParamStore<T>, prefix: &str, cfg: &BottleneckConfig) -> Result<Self> {
        let proj = if cfg.needs_projection() {
            Some((
                Conv::same(store, &join(prefix, "proj"), cfg.in_ch, cfg.out_ch, 1, cfg.stride, 1)?,
                Norm::new(store, &join(prefix, "proj_norm"), cfg.out_ch)?,
            ))
        } else {
            None
        };
        Ok(Shortcut { proj })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.proj {
            Some((conv, norm)) => norm.forward(&conv.forward(x)?),
            None => Ok(x.clone()),
        }
    }
}

fn check_input<T: Real>(what: &str, x: &Tensor<T>, in_ch: usize) -> Result<()> {
    if x.rank() != 4 || x.shape()[1] != in_ch {
        return Err(dim_err!("{what} expects [B, {in_ch}, H, W], got {:?}", x.shape()));
    }
    Ok(())
}

/// 1×1 reduce, 3×3 (strided/dilated), 1×1 expand, residual add, ReLU.
pub struct Bottleneck<T: Real> {
    pub cfg: BottleneckConfig,
    reduce: ConvNorm<T>,
    spatial: ConvNorm<T>,
    expand: ConvNorm<T>,
    shortcut: Shortcut<T>,
}

impl<T: Real> Bottleneck<T> {
    pub fn new(store: &mut ParamStore<T>, prefix: &str, cfg: BottleneckConfig) -> Result<Self> {
        Ok(Bottleneck {
            reduce: ConvNorm::new(store, &join(prefix, "reduce"), cfg.in_ch, cfg.mid_ch, 1, 1, 1, true)?,
            spatial: ConvNorm::new(
                store,
                &join(prefix, "spatial"),
                cfg.mid_ch,
                cfg.mid_ch,
                3,
                cfg.stride,
                cfg.dilation,
                true,
            )?,
            expand: ConvNorm::new(store, &join(prefix, "expand"), cfg.mid_ch, cfg.out_ch, 1, 1, 1, false)?,
            shortcut: Shortcut::new(store, prefix, &cfg)?,
            cfg,
        })
    }
}

impl<T: Real> Module<T> for Bottleneck<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_input("bottleneck", x, self.cfg.in_ch)?;
        let y = self.expand.forward(&self.spatial.forward(&self.reduce.forward(x)?)?)?;
        Ok(y.add(&self.shortcut.forward(x)?)?.relu())
    }
}

/// Bottleneck whose 3×3 convolution is replaced by relative-position
/// self-attention over the spatial grid, followed by a 3×3/2 average pool
/// when the block downsamples.
pub struct BotBlock<T: Real> {
    pub cfg: BottleneckConfig,
    pub grid: (usize, usize),
    reduce: ConvNorm<T>,
    attn: Mhsa<T>,
    attn_norm: Norm<T>,
    expand: ConvNorm<T>,
    shortcut: Shortcut<T>,
}

impl<T: Real> BotBlock<T> {
    /// `grid` is the input spatial size `(h, w)`.
    pub fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: BottleneckConfig,
        heads: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        let mhsa = MhsaConfig {
            d_model: cfg.mid_ch,
            num_heads: heads,
            use_2d_relative_positions: true,
        };
        Ok(BotBlock {
            reduce: ConvNorm::new(store, &join(prefix, "reduce"), cfg.in_ch, cfg.mid_ch, 1, 1, 1, true)?,
            attn: Mhsa::new(store, &join(prefix, "mhsa"), mhsa, Some(grid))?,
            attn_norm: Norm::new(store, &join(prefix, "mhsa_norm"), cfg.mid_ch)?,
            expand: ConvNorm::new(store, &join(prefix, "expand"), cfg.mid_ch, cfg.out_ch, 1, 1, 1, false)?,
            shortcut: Shortcut::new(store, prefix, &cfg)?,
            cfg,
            grid,
        })
    }
}

impl<T: Real> Module<T> for BotBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_input("bottleneck transformer", x, self.cfg.in_ch)?;
        if (x.shape()[2], x.shape()[3]) != self.grid {
            return Err(dim_err!(
                "bottleneck transformer built for {:?} spatial input, got {:?}",
                self.grid,
                x.shape()
            ));
        }
        let mut h = self.attn.forward_spatial(&self.reduce.forward(x)?)?;
        if self.cfg.stride > 1 {
            h = h.avg_pool2d(3, self.cfg.stride, 1)?;
        }
        let h = self.attn_norm.forward(&h)?.relu();
        let y = self.expand.forward(&h)?;
        Ok(y.add(&self.shortcut.forward(x)?)?.relu())
    }
}
