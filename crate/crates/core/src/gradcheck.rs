//! Central finite-difference checks of reverse-mode gradients in 64-bit,
//! for every differentiable op, the building blocks and the four models.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::stream_seed;
use crate::error::{Error, Result};
use crate::models::{Batch, Family, GazeModel, ModelConfig};
use crate::nn::{
    radix_softmax, BasicBlock, BotBlock, Bottleneck, BottleneckConfig, ConvNorm, HrFusion, LayerNorm, Linear, Mhsa,
    MhsaConfig, Mlp, Module, ResNeStBlock, SplitAttentionConv, TransformerEncoderLayer,
};
use crate::param::ParamStore;
use crate::tensor::{no_grad, Conv2dSpec, Tensor};
use crate::train::ohem_weights;
use crate::vision::{bilinear_resize, hflip_image, roi_align_batch, RoiBox};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Coordinates probed per case.
    pub coords: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tolerance: 1e-3,
            coords: 50,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    /// Location and values of the worst coordinate.
    pub worst: String,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type Forward = Box<dyn Fn() -> Result<Tensor<f64>>>;

/// A function of some leaf tensors whose output is projected onto fixed
/// random weights to give a scalar.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    forward: Forward,
}

impl Case {
    fn new(inputs: Vec<Tensor<f64>>, forward: impl Fn() -> Result<Tensor<f64>> + 'static) -> Self {
        Case {
            inputs,
            forward: Box::new(forward),
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::parameter(shape, rand_vec(rng, n, -1.0, 1.0)).expect("shape matches data")
}

/// Leaf with entries bounded away from zero (for kinks at 0).
fn leaf_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::parameter(shape, v).expect("shape matches data")
}

/// Runs one case: analytic gradient of `Σ R ⊙ f(inputs)` against central
/// differences on `cfg.coords` distinct random coordinates.
pub fn check_case(name: &str, case: &Case, cfg: &GradCheckConfig) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, name.len() as u64, name.bytes().map(u64::from).sum()));
    let out = (case.forward)()?;
    let r = Tensor::new(out.shape(), rand_vec(&mut rng, out.numel(), -1.0, 1.0))?;
    let objective = |o: &Tensor<f64>| -> Result<Tensor<f64>> { Ok(o.mul(&r)?.sum_all()) };
    for t in &case.inputs {
        t.zero_grad();
    }
    objective(&out)?.backward()?;
    let grads: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let sizes: Vec<usize> = case.inputs.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if total <= cfg.coords {
        (0..total).collect()
    } else {
        rand::seq::index::sample(&mut rng, total, cfg.coords).into_vec()
    };
    let eval = || -> Result<f64> { no_grad(|| Ok(objective(&(case.forward)()?)?.item())) };
    let (mut max_rel, mut worst) = (0.0f64, String::new());
    for flat in picks.iter().copied() {
        let (mut which, mut idx) = (0, flat);
        while idx >= sizes[which] {
            idx -= sizes[which];
            which += 1;
        }
        let t = &case.inputs[which];
        let x0 = t.data()[idx];
        t.data_mut()[idx] = x0 + cfg.h;
        let fp = eval()?;
        t.data_mut()[idx] = x0 - cfg.h;
        let fm = eval()?;
        t.data_mut()[idx] = x0;
        let numeric = (fp - fm) / (2.0 * cfg.h);
        let analytic = grads[which][idx];
        let e = rel_err(analytic, numeric, cfg.floor);
        if !e.is_finite() || e > max_rel || worst.is_empty() {
            max_rel = if e.is_finite() { e.max(max_rel) } else { f64::INFINITY };
            worst = format!("input {which}[{idx}]: autodiff {analytic:.6e}, numeric {numeric:.6e}");
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        coords: picks.len(),
        max_rel_err: max_rel,
        worst,
        passed: max_rel < cfg.tolerance,
    })
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Case>;

fn params_plus(store: &ParamStore<f64>, extra: &[&Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut v: Vec<Tensor<f64>> = store.params().iter().map(|p| p.tensor.clone()).collect();
    v.extend(extra.iter().map(|t| (*t).clone()));
    v
}

fn op_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", |rng| {
            let (a, b) = (leaf(rng, &[3, 4, 5]), leaf(rng, &[1, 4, 1]));
            let (x, y) = (a.clone(), b.clone());
            Ok(Case::new(vec![a, b], move || x.add(&y)))
        }),
        ("sub", |rng| {
            let (a, b) = (leaf(rng, &[2, 6, 5]), leaf(rng, &[2, 1, 5]));
            let (x, y) = (a.clone(), b.clone());
            Ok(Case::new(vec![a, b], move || x.sub(&y)))
        }),
        ("mul", |rng| {
            let (a, b) = (leaf(rng, &[4, 3, 5]), leaf(rng, &[4, 3, 1]));
            let (x, y) = (a.clone(), b.clone());
            Ok(Case::new(vec![a, b], move || x.mul(&y)))
        }),
        ("scale_add_scalar", |rng| {
            let a = leaf(rng, &[60]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || Ok(x.scale(-1.7).add_scalar(0.3))))
        }),
        ("relu", |rng| {
            let a = leaf_off_zero(rng, &[7, 9]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || Ok(x.relu())))
        }),
        ("sigmoid", |rng| {
            let a = leaf(rng, &[64]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || Ok(x.scale(3.0).sigmoid())))
        }),
        ("sum_all_mean_all", |rng| {
            let a = leaf(rng, &[5, 12]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || x.mul(&x)?.sum_all().add(&x.mean_all())))
        }),
        ("sum_axis_mean_axis", |rng| {
            let a = leaf(rng, &[3, 5, 6]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || x.sum_axis(1)?.mul(&x.mean_axis(1)?)))
        }),
        ("reshape_permute", |rng| {
            let a = leaf(rng, &[2, 3, 4, 5]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || x.permute(&[2, 0, 3, 1])?.reshape(&[4, 30])?.mul(&x.reshape(&[4, 30])?)))
        }),
        ("cat_stack", |rng| {
            let (a, b) = (leaf(rng, &[2, 3, 5]), leaf(rng, &[2, 4, 5]));
            let (x, y) = (a.clone(), b.clone());
            Ok(Case::new(vec![a, b], move || {
                let c = Tensor::cat(&[x.clone(), y.clone()], 1)?;
                Tensor::stack(&[c.clone(), c.scale(2.0).mul(&c)?])
            }))
        }),
        ("narrow", |rng| {
            let a = leaf(rng, &[4, 10, 3]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || x.narrow(1, 2, 5)))
        }),
        ("gather_flat", |rng| {
            let a = leaf(rng, &[60]);
            let idx: Vec<usize> = (0..90).map(|_| rng.random_range(0..60)).collect();
            let x = a.clone();
            let idx = Rc::new(idx);
            Ok(Case::new(vec![a], move || x.gather_flat(idx.clone(), &[9, 10])))
        }),
        ("l1_per_sample", |rng| {
            let p = leaf(rng, &[30, 2]);
            let shift = leaf_off_zero(rng, &[30, 2]);
            let t = Tensor::new(&[30, 2], p.to_vec().iter().zip(shift.to_vec()).map(|(a, s)| a + s).collect())?;
            let x = p.clone();
            Ok(Case::new(vec![p], move || x.l1_per_sample(&t)))
        }),
        ("matmul", |rng| {
            let (a, b) = (leaf(rng, &[2, 4, 6]), leaf(rng, &[2, 6, 5]));
            let (x, y) = (a.clone(), b.clone());
            Ok(Case::new(vec![a, b], move || x.matmul(&y)))
        }),
        ("matmul_t", |rng| {
            let (a, b) = (leaf(rng, &[3, 6, 4]), leaf(rng, &[3, 5, 6]));
            let (x, y) = (a.clone(), b.clone());
            Ok(Case::new(vec![a, b], move || x.matmul_t(&y, true, true)))
        }),
        ("layer_norm", |rng| {
            let (a, g, b) = (leaf(rng, &[3, 4, 10]), leaf(rng, &[10]), leaf(rng, &[10]));
            let (x, gg, bb) = (a.clone(), g.clone(), b.clone());
            Ok(Case::new(vec![a, g, b], move || x.layer_norm(&gg, &bb, 1e-5)))
        }),
        ("group_norm", |rng| {
            let (a, g, b) = (leaf(rng, &[2, 8, 3, 3]), leaf(rng, &[8]), leaf(rng, &[8]));
            let (x, gg, bb) = (a.clone(), g.clone(), b.clone());
            Ok(Case::new(vec![a, g, b], move || x.group_norm(2, &gg, &bb, 1e-5)))
        }),
        ("softmax", |rng| {
            let a = leaf(rng, &[3, 7, 4]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || x.scale(2.0).softmax(1)))
        }),
        ("conv2d_strided", |rng| {
            let (a, w) = (leaf(rng, &[2, 3, 7, 7]), leaf(rng, &[4, 3, 3, 3]));
            let (x, ww) = (a.clone(), w.clone());
            Ok(Case::new(vec![a, w], move || x.conv2d(&ww, Conv2dSpec::new(2, 1, 1))))
        }),
        ("conv2d_dilated_grouped", |rng| {
            let (a, w) = (leaf(rng, &[2, 4, 8, 8]), leaf(rng, &[6, 2, 3, 3]));
            let (x, ww) = (a.clone(), w.clone());
            Ok(Case::new(vec![a, w], move || x.conv2d(&ww, Conv2dSpec::new(1, 2, 2).with_groups(2))))
        }),
        ("max_pool2d", |rng| {
            let a = leaf(rng, &[2, 3, 8, 8]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || x.max_pool2d(3, 2, 1)))
        }),
        ("avg_pool2d", |rng| {
            let a = leaf(rng, &[2, 3, 7, 7]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || x.avg_pool2d(3, 2, 1)))
        }),
        ("global_avg_pool", |rng| {
            let a = leaf(rng, &[2, 5, 4, 3]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || x.global_avg_pool()))
        }),
        ("bilinear_resize", |rng| {
            let a = leaf(rng, &[2, 2, 5, 6]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || {
                let up = bilinear_resize(&x, 9, 11)?;
                let down = bilinear_resize(&x, 3, 2)?;
                up.sum_all().add(&down.mul(&down)?.sum_all())?.reshape(&[1])
            }))
        }),
        ("roi_align", |rng| {
            let a = leaf(rng, &[2, 3, 10, 12]);
            let boxes = vec![RoiBox::new(1.3, 0.7, 8.9, 6.2)?, RoiBox::new(-0.5, 2.25, 4.0, 9.75)?];
            let x = a.clone();
            Ok(Case::new(vec![a], move || roi_align_batch(&x, &boxes, 4, 3, 2)))
        }),
        ("hflip", |rng| {
            let a = leaf(rng, &[2, 3, 4, 5]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || hflip_image(&x)?.mul(&x)))
        }),
        ("ohem_weights", |rng| {
            let a = Tensor::parameter(&[50], rand_vec(rng, 50, 0.0, 3.0))?;
            let x = a.clone();
            Ok(Case::new(vec![a], move || ohem_weights(&x, 0.3, 2.0)))
        }),
        ("radix_softmax", |rng| {
            let a = leaf(rng, &[3, 24]);
            let x = a.clone();
            Ok(Case::new(vec![a], move || radix_softmax(&x, 2, 3)))
        }),
    ]
}

fn block_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("linear", |rng| {
            let mut s = ParamStore::new(rng.random());
            let m = Linear::new(&mut s, "l", 6, 5)?;
            let x = leaf(rng, &[2, 3, 6]);
            let xi = x.clone();
            Ok(Case::new(params_plus(&s, &[&x]), move || m.forward(&xi)))
        }),
        ("mlp", |rng| {
            let mut s = ParamStore::new(rng.random());
            let m = Mlp::new(&mut s, "m", &[6, 9, 2])?;
            let x = leaf(rng, &[4, 6]);
            let xi = x.clone();
            Ok(Case::new(params_plus(&s, &[&x]), move || m.forward(&xi)))
        }),
        ("layer_norm_module", |rng| {
            let mut s = ParamStore::new(rng.random());
            let m = LayerNorm::new(&mut s, "n", 12)?;
            let x = leaf(rng, &[5, 12]);
            let xi = x.clone();
            Ok(Case::new(params_plus(&s, &[&x]), move || m.forward(&xi)))
        }),
        ("conv_norm", |rng| {
            let mut s = ParamStore::new(rng.random());
            let m = ConvNorm::new(&mut s, "c", 3, 8, 3, 2, 1, false)?;
            let x = leaf(rng, &[2, 3, 6, 6]);
            let xi = x.clone();
            Ok(Case::new(params_plus(&s, &[&x]), move || m.forward(&xi)))
        }),
        ("mhsa", |rng| {
            let mut s = ParamStore::new(rng.random());
            let cfg = MhsaConfig {
                d_model: 8,
                num_heads: 2,
                use_2d_relative_positions: false,
            };
            let m = Mhsa::new(&mut s, "a", cfg, None)?;
            let x = leaf(rng, &[2, 3, 8]);
            let xi = x.clone();
            Ok(Case::new(params_plus(&s, &[&x]), move || m.forward(&xi)))
        }),
        ("mhsa_relative_2d", |rng| {
            let mut s = ParamStore::new(rng.random());
            let cfg = MhsaConfig {
                d_model: 8,
                num_heads: 2,
                use_2d_relative_positions: true,
            };
            let m = Mhsa::new(&mut s, "a", cfg, Some((3, 2)))?;
            let x = leaf(rng, &[2, 8, 3, 2]);
            let xi = x.clone();
            Ok(Case::new(params_plus(&s, &[&x]), move || m.forward_spatial(&xi)))
        }),
        ("transformer_encoder", |rng| {
            let mut s = ParamStore::new(rng.random());
            let cfg = MhsaConfig {
                d_model: 8,
                num_heads: 4,
                use_2d_relative_positions: false,
            };
            let m = TransformerEncoderLayer::new(&mut s, "e", cfg, 16)?;
            let x = leaf(rng, &[2, 3, 8]);
            let xi = x.clone();
            Ok(Case::new(params_plus(&s, &[&x]), move || m.forward(&xi)))
        }),
        ("bottleneck", |rng| {
            let mut s = ParamStore::new(rng.random());
            let m = Bottleneck::new(&mut s, "b", BottleneckConfig::new(8, 8, 16, 2).dilated(2))?;
            let x = leaf(rng, &[2, 8, 6, 6]);
            let xi = x.clone();
            Ok(Case::new(params_plus(&s, &[&x]), move || m.forward(&xi)))
        }),
        ("bot_block", |rng| {
            let mut s = ParamStore::new(rng.random());
            let m = BotBlock::new(&mut s, "b", BottleneckConfig::new(8, 8, 16, 2), 2, (4, 4))?;
            let x = leaf(rng, &[2, 8, 4, 4]);
            let xi = x.clone();
            Ok(Case::new(params_plus(&s, &[&x]), move || m.forward(&xi)))
        }),
        ("split_attention", |rng| {
            let mut s = ParamStore::new(rng.random());
            let m = SplitAttentionConv::new(&mut s, "s", 8, 2, 2)?;
            let x = leaf(rng, &[2, 8, 4, 4]);
            let xi = x.clone();
            Ok(Case::new(params_plus(&s, &[&x]), move || m.forward(&xi)))
        }),
        ("resnest_block", |rng| {
            let mut s = ParamStore::new(rng.random());
            let m = ResNeStBlock::new(&mut s, "r", 8, 8, 16, 2, 1, 2)?;
            let x = leaf(rng, &[2, 8, 5, 5]);
            let xi = x.clone();
            Ok(Case::new(params_plus(&s, &[&x]), move || m.forward(&xi)))
        }),
        ("basic_block", |rng| {
            let mut s = ParamStore::new(rng.random());
            let m = BasicBlock::new(&mut s, "h", 8)?;
            let x = leaf(rng, &[2, 8, 4, 4]);
            let xi = x.clone();
            Ok(Case::new(params_plus(&s, &[&x]), move || m.forward(&xi)))
        }),
        ("hr_fusion", |rng| {
            let mut s = ParamStore::new(rng.random());
            let m = HrFusion::new(&mut s, "f", &[8, 16, 8])?;
            let xs = [leaf(rng, &[2, 8, 8, 8]), leaf(rng, &[2, 16, 4, 4]), leaf(rng, &[2, 8, 2, 2])];
            let xi = xs.clone();
            Ok(Case::new(params_plus(&s, &[&xs[0], &xs[1], &xs[2]]), move || {
                let outs = m.forward(&xi)?;
                let flat: Vec<Tensor<f64>> = outs
                    .iter()
                    .map(|o| o.reshape(&[o.numel()]))
                    .collect::<Result<_>>()?;
                Tensor::cat(&flat, 0)
            }))
        }),
    ]
}

fn model_case(family: Family, rng: &mut ChaCha8Rng) -> Result<Case> {
    let cfg = ModelConfig::new(family, 32, 0.125, rng.random());
    let model = GazeModel::<f64>::build(&cfg)?;
    let images = Tensor::parameter(&[2, 3, 32, 32], rand_vec(rng, 2 * 3 * 32 * 32, 0.0, 255.0))?;
    let boxes = vec![
        [RoiBox::new(4.0, 6.5, 14.0, 16.5)?, RoiBox::new(18.25, 6.0, 28.25, 16.0)?],
        [RoiBox::new(3.0, 8.0, 13.5, 18.5)?, RoiBox::new(17.0, 7.75, 27.5, 18.25)?],
    ];
    let inputs = params_plus(model.store(), &[&images]);
    Ok(Case::new(inputs, move || {
        model.forward(&Batch {
            images: images.clone(),
            eye_boxes: Some(boxes.clone()),
        })
    }))
}

fn model_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("model_itracker_mhsa", |rng| model_case(Family::ItrackerMhsa, rng)),
        ("model_botnet", |rng| model_case(Family::Botnet, rng)),
        ("model_hrnet", |rng| model_case(Family::Hrnet, rng)),
        ("model_resnest", |rng| model_case(Family::Resnest, rng)),
    ]
}

/// `(group, case)` for every registered check.
pub fn case_names() -> Vec<(&'static str, &'static str)> {
    let mut out = Vec::new();
    for (group, cases) in [("ops", op_cases()), ("blocks", block_cases()), ("models", model_cases())] {
        out.extend(cases.into_iter().map(|(n, _)| (group, n)));
    }
    out
}

/// Runs every case whose name or group equals `filter` (all when `None`).
pub fn run(filter: Option<&str>, cfg: &GradCheckConfig) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for (group, cases) in [("ops", op_cases()), ("blocks", block_cases()), ("models", model_cases())] {
        for (name, build) in cases {
            if filter.is_some_and(|f| f != group && f != name) {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, reports.len() as u64, 0x6C));
            let case = build(&mut rng)?;
            reports.push(check_case(name, &case, cfg)?);
        }
    }
    if reports.is_empty() {
        let known: Vec<&str> = case_names().iter().map(|(_, n)| *n).collect();
        return Err(Error::Config(format!(
            "no gradient check named {:?}; use ops, blocks, models or one of: {}",
            filter.unwrap_or_default(),
            known.join(", ")
        )));
    }
    Ok(reports)
}
