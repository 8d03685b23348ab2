use super::{Conv, ConvNorm, Linear, Module, Norm};
use crate::error::{dim_err, Error, Result};
use crate::param::{join, ParamStore};
use crate::tensor::{Conv2dSpec, Real, Tensor};

/// Converts `[B, C·r]` logits laid out as `[k, r, C/k]` into per-split
/// weights `[B, r, C]`: softmax over the radix axis for `r ≥ 2`, sigmoid
/// for `r = 1`.
pub fn radix_softmax<T: Real>(logits: &Tensor<T>, cardinality: usize, radix: usize) -> Result<Tensor<T>> {
    let (b, n) = (logits.shape()[0], logits.numel() / logits.shape()[0].max(1));
    if logits.rank() != 2 || n % (cardinality * radix) != 0 {
        return Err(dim_err!(
            "radix softmax: logits {:?} not divisible into {cardinality} groups x {radix} splits",
            logits.shape()
        ));
    }
    let c = n / radix;
    if radix == 1 {
        return logits.sigmoid().reshape(&[b, 1, c]);
    }
    logits
        .reshape(&[b, cardinality, radix, c / cardinality])?
        .softmax(2)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, radix, c])
}

/// Grouped 3×3 conv producing `r` splits per cardinal group, fused by
/// channel attention computed from their pooled sum.
pub struct SplitAttentionConv<T: Real> {
    pub channels: usize,
    pub cardinality: usize,
    pub radix: usize,
    conv: Conv<T>,
    conv_norm: Norm<T>,
    fc1: Linear<T>,
    fc2: Linear<T>,
}

impl<T: Real> SplitAttentionConv<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        cardinality: usize,
        radix: usize,
    ) -> Result<Self> {
        let kr = cardinality * radix;
        if kr == 0 || !channels.is_multiple_of(kr) {
            return Err(Error::Config(format!(
                "{prefix}: {channels} channels not divisible by cardinality {cardinality} x radix {radix}"
            )));
        }
        let inter = (channels * radix / 4).max(8);
        let spec = Conv2dSpec::new(1, 1, 1).with_groups(kr);
        Ok(SplitAttentionConv {
            channels,
            cardinality,
            radix,
            conv: Conv::new(store, &join(prefix, "conv"), channels, channels * radix, 3, spec)?,
            conv_norm: Norm::new(store, &join(prefix, "conv_norm"), channels * radix)?,
            fc1: Linear::new(store, &join(prefix, "fc1"), channels, inter)?,
            fc2: Linear::new(store, &join(prefix, "fc2"), inter, channels * radix)?,
        })
    }

    /// Per-split attention weights `[B, r, C]` for an input map.
    pub fn attention(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.splits_and_attention(x)?.1)
    }

    fn splits_and_attention(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (c, r) = (self.channels, self.radix);
        let y = self.conv_norm.forward(&self.conv.forward(x)?)?.relu();
        let splits = y.reshape(&[b, r, c, h, w])?;
        let gap = splits.sum_axis(1)?.global_avg_pool()?;
        let logits = self.fc2.forward(&self.fc1.forward(&gap)?.relu())?;
        Ok((splits, radix_softmax(&logits, self.cardinality, r)?))
    }
}

impl<T: Real> Module<T> for SplitAttentionConv<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.shape()[1] != self.channels {
            return Err(dim_err!(
                "split attention expects [B, {}, H, W], got {:?}",
                self.channels,
                x.shape()
            ));
        }
        let (b, r, c) = (x.shape()[0], self.radix, self.channels);
        let (splits, attn) = self.splits_and_attention(x)?;
        splits.mul(&attn.reshape(&[b, r, c, 1, 1])?)?.sum_axis(1)
    }
}

/// Bottleneck with a split-attention middle stage; strided blocks
/// downsample with a 3×3/2 average pool after the attention.
pub struct ResNeStBlock<T: Real> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    reduce: ConvNorm<T>,
    split: SplitAttentionConv<T>,
    expand: ConvNorm<T>,
    proj: Option<(Conv<T>, Norm<T>)>,
}

impl<T: Real> ResNeStBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_ch: usize,
        mid_ch: usize,
        out_ch: usize,
        stride: usize,
        cardinality: usize,
        radix: usize,
    ) -> Result<Self> {
        let proj = if stride != 1 || in_ch != out_ch {
            Some((
                Conv::same(store, &join(prefix, "proj"), in_ch, out_ch, 1, stride, 1)?,
                Norm::new(store, &join(prefix, "proj_norm"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(ResNeStBlock {
            in_ch,
            out_ch,
            stride,
            reduce: ConvNorm::new(store, &join(prefix, "reduce"), in_ch, mid_ch, 1, 1, 1, true)?,
            split: SplitAttentionConv::new(store, &join(prefix, "split"), mid_ch, cardinality, radix)?,
            expand: ConvNorm::new(store, &join(prefix, "expand"), mid_ch, out_ch, 1, 1, 1, false)?,
            proj,
        })
    }
}

impl<T: Real> Module<T> for ResNeStBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.shape()[1] != self.in_ch {
            return Err(dim_err!("split-attention block expects [B, {}, H, W], got {:?}", self.in_ch, x.shape()));
        }
        let mut h = self.split.forward(&self.reduce.forward(x)?)?;
        if self.stride > 1 {
            h = h.avg_pool2d(3, self.stride, 1)?;
        }
        let y = self.expand.forward(&h)?;
        let sc = match &self.proj {
            Some((conv, norm)) => norm.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok(y.add(&sc)?.relu())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_all;
    use proptest::prelude::*;

    fn input(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i * 29 % 17) as f64 - 8.0) / 5.0).collect()).unwrap()
    }

    #[test]
    fn weights_sum_to_one_across_splits() {
        let mut s = ParamStore::<f64>::new(4);
        let sa = SplitAttentionConv::new(&mut s, "sa", 16, 2, 4).unwrap();
        let a = sa.attention(&input(&[2, 16, 5, 5])).unwrap();
        assert_eq!(a.shape(), &[2, 4, 16]);
        let v = a.to_vec();
        for b in 0..2 {
            for c in 0..16 {
                let sum: f64 = (0..4).map(|r| v[(b * 4 + r) * 16 + c]).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_paths_get_uniform_weights() {
        let mut s = ParamStore::<f64>::new(4);
        let sa = SplitAttentionConv::new(&mut s, "sa", 8, 2, 2).unwrap();
        // same logits for every split of a channel: copy radix slot 0 columns
        {
            let mut w = sa.fc2.weight.data_mut();
            let (inter, n) = (sa.fc2.in_dim, sa.fc2.out_dim);
            let per = 8 / 2;
            for i in 0..inter {
                for g in 0..2 {
                    for j in 0..per {
                        let src = i * n + g * 2 * per + j;
                        w[src + per] = w[src];
                    }
                }
            }
        }
        let a = sa.attention(&input(&[1, 8, 4, 4])).unwrap();
        for v in a.to_vec() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn radix_one_uses_sigmoid() {
        let logits = Tensor::<f64>::from_f64(&[1, 4], &[-2.0, 0.0, 0.5, 3.0]).unwrap();
        let a = radix_softmax(&logits, 2, 1).unwrap();
        assert_eq!(a.shape(), &[1, 1, 4]);
        for (v, x) in a.to_vec().iter().zip([-2.0f64, 0.0, 0.5, 3.0]) {
            assert!((v - 1.0 / (1.0 + (-x).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn radix_layout() {
        // k=1, r=2, C=2: logits [s0c0, s0c1, s1c0, s1c1]
        let logits = Tensor::<f64>::from_f64(&[1, 4], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let a = radix_softmax(&logits, 1, 2).unwrap().to_vec();
        assert!((a[0] - 0.5).abs() < 1e-15 && (a[2] - 0.5).abs() < 1e-15);
        let e = 1.0f64.exp();
        assert!((a[1] - e / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn rejects_indivisible_channels() {
        let mut s = ParamStore::<f64>::new(0);
        assert!(SplitAttentionConv::new(&mut s, "sa", 10, 2, 2).is_err());
    }

    #[test]
    fn zeroed_block_is_relu_passthrough() {
        let mut s = ParamStore::<f64>::new(0);
        let b = ResNeStBlock::new(&mut s, "rs", 16, 8, 16, 1, 2, 2).unwrap();
        zero_all(&s, |n| n.ends_with("expand.conv.weight"));
        let x = input(&[1, 16, 4, 4]);
        assert_eq!(b.forward(&x).unwrap().to_vec(), x.relu().to_vec());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn block_shape_contract(k in 1usize..3, r in 1usize..4, stride in 1usize..3, h in 3usize..8) {
            let mut s = ParamStore::<f64>::new(2);
            let mid = 4 * k * r;
            let b = ResNeStBlock::new(&mut s, "rs", 8, mid, 16, stride, k, r).unwrap();
            let y = b.forward(&input(&[2, 8, h, h])).unwrap();
            prop_assert_eq!(y.shape(), &[2, 16, h.div_ceil(stride), h.div_ceil(stride)]);
        }
    }
}
