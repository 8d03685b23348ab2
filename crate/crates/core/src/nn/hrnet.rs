use super::{Conv, ConvNorm, Module, Norm};
use crate::error::{dim_err, Error, Result};
use crate::param::{join, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::vision::bilinear_resize;

/// Two 3×3 convs with an identity shortcut.
pub struct BasicBlock<T: Real> {
    a: ConvNorm<T>,
    b: ConvNorm<T>,
}

impl<T: Real> BasicBlock<T> {
    pub fn new(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(BasicBlock {
            a: ConvNorm::new(store, &join(prefix, "a"), channels, channels, 3, 1, 1, true)?,
            b: ConvNorm::new(store, &join(prefix, "b"), channels, channels, 3, 1, 1, false)?,
        })
    }
}

impl<T: Real> Module<T> for BasicBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.b.forward(&self.a.forward(x)?)?.add(x)?.relu())
    }
}

enum Adapter<T: Real> {
    Identity,
    /// 1×1 conv + norm, then bilinear upsampling to the target size.
    Up(Conv<T>, Norm<T>),
    /// Stride-2 3×3 convs; all but the last keep the source width and apply ReLU.
    Down(Vec<ConvNorm<T>>),
}

/// Exchange unit across parallel resolution branches.
pub struct HrFusion<T: Real> {
    pub channels: Vec<usize>,
    adapters: Vec<Vec<Adapter<T>>>,
}

impl<T: Real> HrFusion<T> {
    pub fn new(store: &mut ParamStore<T>, prefix: &str, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config(format!("{prefix}: fusion needs at least one branch")));
        }
        let mut adapters = Vec::new();
        for (i, &ci) in channels.iter().enumerate() {
            let mut row = Vec::new();
            for (j, &cj) in channels.iter().enumerate() {
                let p = join(prefix, &format!("{j}to{i}"));
                row.push(if i == j {
                    Adapter::Identity
                } else if j > i {
                    Adapter::Up(Conv::same(store, &join(&p, "conv"), cj, ci, 1, 1, 1)?, Norm::new(store, &join(&p, "norm"), ci)?)
                } else {
                    let steps = i - j;
                    (0..steps)
                        .map(|s| {
                            let last = s + 1 == steps;
                            let out = if last { ci } else { cj };
                            ConvNorm::new(store, &join(&p, &format!("down{s}")), cj, out, 3, 2, 1, !last)
                        })
                        .collect::<Result<Vec<_>>>()
                        .map(Adapter::Down)?
                });
            }
            adapters.push(row);
        }
        Ok(HrFusion {
            channels: channels.to_vec(),
            adapters,
        })
    }

    fn check(&self, xs: &[Tensor<T>]) -> Result<()> {
        if xs.len() != self.channels.len() {
            return Err(dim_err!("fusion expects {} branches, got {}", self.channels.len(), xs.len()));
        }
        let s0 = xs[0].shape();
        for (i, (x, &c)) in xs.iter().zip(&self.channels).enumerate() {
            let s = x.shape();
            let dyadic = s.len() == 4
                && s[0] == s0[0]
                && s[1] == c
                && s0[2].is_multiple_of(1 << i)
                && s0[3].is_multiple_of(1 << i)
                && s[2] == s0[2] >> i
                && s[3] == s0[3] >> i;
            if !dyadic {
                return Err(dim_err!(
                    "fusion branch {i} has shape {s:?}; expected [{}, {c}, {}, {}] (branch 0 is {s0:?})",
                    s0[0],
                    s0[2] as f64 / (1 << i) as f64,
                    s0[3] as f64 / (1 << i) as f64
                ));
            }
        }
        Ok(())
    }

    pub fn forward(&self, xs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        self.check(xs)?;
        self.adapters
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let (h, w) = (xs[i].shape()[2], xs[i].shape()[3]);
                let mut acc: Option<Tensor<T>> = None;
                for (x, adapter) in xs.iter().zip(row) {
                    let y = match adapter {
                        Adapter::Identity => x.clone(),
                        Adapter::Up(conv, norm) => bilinear_resize(&norm.forward(&conv.forward(x)?)?, h, w)?,
                        Adapter::Down(chain) => chain.iter().try_fold(x.clone(), |h, c| c.forward(&h))?,
                    };
                    acc = Some(match acc {
                        Some(a) => a.add(&y)?,
                        None => y,
                    });
                }
                Ok(acc.expect("at least one branch").relu())
            })
            .collect()
    }
}
