use super::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::nn::{
    BasicBlock, BotBlock, Bottleneck, BottleneckConfig, ConvNorm, HrFusion, Linear, MhsaConfig, Mlp, Module,
    ResNeStBlock, TransformerEncoderLayer,
};
use crate::param::{join, ParamStore};
use crate::tensor::{Conv2dSpec, Real, Tensor};
use crate::vision::{bilinear_resize, roi_align_batch, RoiBox};

fn half(n: usize) -> usize {
    Conv2dSpec::new(2, 1, 1).out_len(n, 3).expect("positive size")
}

/// A sequence of residual bottlenecks; each stage is one strided (or
/// shape-changing) block followed by `repeat − 1` identity-shaped ones.
struct BottleneckStack<T: Real> {
    blocks: Vec<Bottleneck<T>>,
}

impl<T: Real> BottleneckStack<T> {
    fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        mut in_ch: usize,
        stages: &[(usize, usize, usize, usize)],
        repeat: usize,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        for (s, &(mid, out, stride, dilation)) in stages.iter().enumerate() {
            for r in 0..repeat {
                let stride = if r == 0 { stride } else { 1 };
                let cfg = BottleneckConfig::new(in_ch, mid, out, stride).dilated(dilation);
                blocks.push(Bottleneck::new(store, &join(prefix, &format!("s{s}b{r}")), cfg)?);
                in_ch = out;
            }
        }
        Ok(BottleneckStack { blocks })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.blocks.iter().try_fold(x.clone(), |h, b| b.forward(&h))
    }
}

pub struct ITracker<T: Real> {
    face_stem: ConvNorm<T>,
    face: BottleneckStack<T>,
    eye_stem: ConvNorm<T>,
    eye: BottleneckStack<T>,
    face_proj: Linear<T>,
    eye_proj: Linear<T>,
    encoder: Vec<TransformerEncoderLayer<T>>,
    head: Mlp<T>,
    pub crop: usize,
    pub d_model: usize,
}

/// Bilinear samples per RoI bin along each axis.
pub const EYE_SAMPLES_PER_BIN: usize = 2;

impl<T: Real> ITracker<T> {
    pub fn new(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let p = &cfg.family_params;
        let c = |n| cfg.ch(n);
        let face_stem = ConvNorm::new(store, "face.stem", 3, c(64), 3, 2, 1, true)?;
        let face = BottleneckStack::new(
            store,
            "face",
            c(64),
            &[(c(64), c(256), 1, 1), (c(128), c(512), 2, 1), (c(256), c(1024), 2, 1)],
            p.blocks_per_stage,
        )?;
        let eye_stem = ConvNorm::new(store, "eye.stem", 3, c(64), 3, 1, 1, true)?;
        let eye = BottleneckStack::new(
            store,
            "eye",
            c(64),
            &[(c(64), c(256), 1, 2), (c(128), c(512), 2, 1), (c(128), c(512), 1, 2)],
            p.blocks_per_stage,
        )?;
        let d = c(p.d_model);
        let mhsa = MhsaConfig {
            d_model: d,
            num_heads: p.num_heads,
            use_2d_relative_positions: false,
        };
        let face_proj = Linear::new(store, "fusion.face_proj", c(1024), d)?;
        let eye_proj = Linear::new(store, "fusion.eye_proj", c(512), d)?;
        let encoder = (0..p.encoder_layers)
            .map(|i| TransformerEncoderLayer::new(store, &format!("fusion.encoder{i}"), mhsa, 4 * d))
            .collect::<Result<Vec<_>>>()?;
        let head = Mlp::new(store, "head", &[3 * d, p.head_hidden, 2])?;
        Ok(ITracker {
            face_stem,
            face,
            eye_stem,
            eye,
            face_proj,
            eye_proj,
            encoder,
            head,
            crop: cfg.input_size / 4,
            d_model: d,
        })
    }

    fn face_token(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.face_stem.forward(img)?.max_pool2d(3, 2, 1)?;
        self.face_proj.forward(&self.face.forward(&h)?.global_avg_pool()?)
    }

    /// Eye-branch features `[B, 2, F]` (left then right) before projection.
    pub fn eye_features(&self, img: &Tensor<T>, boxes: &[[RoiBox; 2]]) -> Result<Tensor<T>> {
        let b = img.shape()[0];
        let left: Vec<RoiBox> = boxes.iter().map(|p| p[0]).collect();
        let right: Vec<RoiBox> = boxes.iter().map(|p| p[1]).collect();
        let crops = Tensor::cat(
            &[
                roi_align_batch(img, &left, self.crop, self.crop, EYE_SAMPLES_PER_BIN)?,
                roi_align_batch(img, &right, self.crop, self.crop, EYE_SAMPLES_PER_BIN)?,
            ],
            0,
        )?;
        let f = self.eye.forward(&self.eye_stem.forward(&crops)?)?.global_avg_pool()?;
        let dim = f.shape()[1];
        f.reshape(&[2, b, dim])?.permute(&[1, 0, 2])
    }

    /// Projected eye tokens `[B, 2, d_model]` (left then right).
    pub fn eye_tokens(&self, img: &Tensor<T>, boxes: &[[RoiBox; 2]]) -> Result<Tensor<T>> {
        self.eye_proj.forward(&self.eye_features(img, boxes)?)
    }

    pub fn forward(&self, img: &Tensor<T>, boxes: &[[RoiBox; 2]]) -> Result<Tensor<T>> {
        let b = img.shape()[0];
        let d = self.d_model;
        let face = self.face_token(img)?.reshape(&[b, 1, d])?;
        let mut tokens = Tensor::cat(&[face, self.eye_tokens(img, boxes)?], 1)?;
        for layer in &self.encoder {
            tokens = layer.forward(&tokens)?;
        }
        self.head.forward(&tokens.reshape(&[b, 3 * d])?)
    }
}

pub struct BotNet<T: Real> {
    stem: ConvNorm<T>,
    convs: BottleneckStack<T>,
    bots: Vec<BotBlock<T>>,
    head: Mlp<T>,
}

impl<T: Real> BotNet<T> {
    pub fn new(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let p = &cfg.family_params;
        let c = |n| cfg.ch(n);
        let stem = ConvNorm::new(store, "stem", 3, c(64), 3, 2, 1, true)?;
        let convs = BottleneckStack::new(
            store,
            "res",
            c(64),
            &[(c(64), c(256), 1, 1), (c(128), c(512), 2, 1), (c(256), c(1024), 2, 1)],
            1,
        )?;
        // spatial size entering the attention blocks
        let mut s = half(half(half(half(cfg.input_size))));
        let mut bots = Vec::new();
        let mut in_ch = c(1024);
        for i in 0..3 * p.blocks_per_stage {
            let stride = if i == 0 { 2 } else { 1 };
            let bc = BottleneckConfig::new(in_ch, c(512), c(2048), stride);
            bots.push(BotBlock::new(store, &format!("bot{i}"), bc, p.bot_heads, (s, s))?);
            if stride == 2 {
                s = half(s);
            }
            in_ch = c(2048);
        }
        let head = Mlp::new(store, "head", &[c(2048), p.head_hidden, 2])?;
        Ok(BotNet { stem, convs, bots, head })
    }

    pub fn forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.stem.forward(img)?.max_pool2d(3, 2, 1)?;
        let h = self.convs.forward(&h)?;
        let h = self.bots.iter().try_fold(h, |h, b| b.forward(&h))?;
        self.head.forward(&h.global_avg_pool()?)
    }
}

pub struct HrNet<T: Real> {
    stem: Vec<ConvNorm<T>>,
    widths: Vec<usize>,
    /// Per stage: the transition creating the new branch (absent for the first stage).
    transitions: Vec<Option<ConvNorm<T>>>,
    blocks: Vec<Vec<Vec<BasicBlock<T>>>>,
    fusions: Vec<HrFusion<T>>,
    representation: Linear<T>,
    head: Mlp<T>,
}

impl<T: Real> HrNet<T> {
    pub fn new(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let p = &cfg.family_params;
        let c = |n| cfg.ch(n);
        let widths: Vec<usize> = (0..p.branches).map(|i| c(64 << i)).collect();
        let stem = vec![
            ConvNorm::new(store, "stem.0", 3, c(64), 3, 2, 1, true)?,
            ConvNorm::new(store, "stem.1", c(64), widths[0], 3, 2, 1, true)?,
        ];
        let mut transitions = Vec::new();
        let mut blocks = Vec::new();
        let mut fusions = Vec::new();
        for stage in 0..p.branches {
            let prefix = format!("stage{stage}");
            transitions.push(if stage == 0 {
                None
            } else {
                Some(ConvNorm::new(
                    store,
                    &join(&prefix, "transition"),
                    widths[stage - 1],
                    widths[stage],
                    3,
                    2,
                    1,
                    true,
                )?)
            });
            let mut per_branch = Vec::new();
            for (br, &w) in widths[..=stage].iter().enumerate() {
                per_branch.push(
                    (0..p.blocks_per_stage)
                        .map(|k| BasicBlock::new(store, &join(&prefix, &format!("b{br}.{k}")), w))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            blocks.push(per_branch);
            fusions.push(HrFusion::new(store, &join(&prefix, "fuse"), &widths[..=stage])?);
        }
        let total: usize = widths.iter().sum();
        let representation = Linear::new(store, "representation", total, c(1000))?;
        let head = Mlp::new(store, "head", &[c(1000), p.head_hidden, 2])?;
        Ok(HrNet {
            stem,
            widths,
            transitions,
            blocks,
            fusions,
            representation,
            head,
        })
    }

    pub fn forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.stem.iter().try_fold(img.clone(), |h, l| l.forward(&h))?;
        let mut branches = vec![x];
        for ((transition, blocks), fusion) in self.transitions.iter().zip(&self.blocks).zip(&self.fusions) {
            if let Some(t) = transition {
                let new = t.forward(branches.last().expect("non-empty"))?;
                branches.push(new);
            }
            for (x, bl) in branches.iter_mut().zip(blocks) {
                *x = bl.iter().try_fold(x.clone(), |h, b| b.forward(&h))?;
            }
            branches = fusion.forward(&branches)?;
        }
        debug_assert_eq!(branches.len(), self.widths.len());
        let (h, w) = (branches[0].shape()[2], branches[0].shape()[3]);
        let up = branches
            .iter()
            .map(|b| bilinear_resize(b, h, w))
            .collect::<Result<Vec<_>>>()?;
        let rep = self.representation.forward(&Tensor::cat(&up, 1)?.global_avg_pool()?)?.relu();
        self.head.forward(&rep)
    }
}

pub struct ResNeSt<T: Real> {
    stem: ConvNorm<T>,
    blocks: Vec<ResNeStBlock<T>>,
    head: Mlp<T>,
}

impl<T: Real> ResNeSt<T> {
    pub fn new(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let p = &cfg.family_params;
        let c = |n| cfg.ch(n);
        let stem = ConvNorm::new(store, "stem", 3, c(64), 3, 2, 1, true)?;
        let stages = [(c(64), c(256), 1), (c(128), c(512), 2), (c(256), c(1024), 2), (c(512), c(2048), 2)];
        let mut blocks = Vec::new();
        let mut in_ch = c(64);
        for (s, &(mid, out, stride)) in stages.iter().enumerate() {
            for r in 0..p.blocks_per_stage {
                let stride = if r == 0 { stride } else { 1 };
                blocks.push(ResNeStBlock::new(
                    store,
                    &format!("s{s}b{r}"),
                    in_ch,
                    mid,
                    out,
                    stride,
                    p.cardinality,
                    p.radix,
                )?);
                in_ch = out;
            }
        }
        let head = Mlp::new(store, "head", &[c(2048), p.head_hidden, p.head_hidden, 2])?;
        Ok(ResNeSt { stem, blocks, head })
    }

    pub fn forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.stem.forward(img)?.max_pool2d(3, 2, 1)?;
        let h = self.blocks.iter().try_fold(h, |h, b| b.forward(&h))?;
        self.head.forward(&h.global_avg_pool()?)
    }
}

pub(super) fn check_image<T: Real>(img: &Tensor<T>, size: usize) -> Result<()> {
    match *img.shape() {
        [_, 3, h, w] if h == size && w == size => Ok(()),
        _ => Err(dim_err!("model expects [B, 3, {size}, {size}] images, got {:?}", img.shape())),
    }
}
