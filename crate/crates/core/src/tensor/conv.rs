use rayon::prelude::*;

use super::{gemm, MatRef, Real, Tensor};
use crate::error::{dim_err, Result};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            dilation,
            groups: 1,
        }
    }

    pub fn with_groups(self, groups: usize) -> Self {
        Conv2dSpec { groups, ..self }
    }

    /// Output extent along one axis, or `None` when it would be < 1.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    dil: usize,
}

impl Geom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `lo..hi` whose input column for kernel offset `kj`
    /// lies inside the image, and the input column of `lo`.
    fn valid_cols(&self, kj: usize) -> (usize, usize, usize) {
        let off = kj * self.dil;
        let lo = if self.pad > off { (self.pad - off).div_ceil(self.stride) } else { 0 };
        let hi = if self.w + self.pad > off {
            (self.w + self.pad - off).div_ceil(self.stride).min(self.ow)
        } else {
            0
        };
        let lo = lo.min(hi);
        (lo, hi, (lo * self.stride + off).saturating_sub(self.pad))
    }

    fn row_of(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki * self.dil) as isize - self.pad as isize;
        (iy >= 0 && iy < self.h as isize).then_some(iy as usize)
    }

    /// Unfolds channels `c0..c0+cg` of one image into `[cg·kh·kw, oh·ow]`.
    fn im2col<T: Real>(&self, x: &[T], c0: usize, cg: usize, col: &mut [T]) {
        let p = self.oh * self.ow;
        for c in 0..cg {
            let plane = &x[(c0 + c) * self.h * self.w..(c0 + c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (lo, hi, ix0) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let Some(iy) = self.row_of(oy, ki) else {
                            line.fill(T::zero());
                            continue;
                        };
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (v, &s) in line[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(self.stride)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates `col` into `dx`.
    fn col2im<T: Real>(&self, col: &[T], c0: usize, cg: usize, dx: &mut [T]) {
        let p = self.oh * self.ow;
        for c in 0..cg {
            let plane = &mut dx[(c0 + c) * self.h * self.w..(c0 + c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    let (lo, hi, ix0) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let Some(iy) = self.row_of(oy, ki) else { continue };
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let line = &src[oy * self.ow + lo..oy * self.ow + hi];
                        for (d, &v) in dst[ix0..].iter_mut().step_by(self.stride).zip(line) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(dim_err!("{what} expects a [B, C, H, W] tensor, got {shape:?}")),
    }
}

impl<T: Real> Tensor<T> {
    /// 2-D cross-correlation (no kernel flip) of `[B, C, H, W]` with
    /// `[O, C/groups, kh, kw]` weights.
    pub fn conv2d(&self, weight: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
        let [b, c, h, w] = dims4(self.shape(), "conv2d")?;
        let [o, cw, kh, kw] = dims4(weight.shape(), "conv2d weight")?;
        let groups = spec.groups;
        if spec.stride == 0 || spec.dilation == 0 || groups == 0 {
            return Err(dim_err!("conv2d stride, dilation and groups must be ≥ 1: {spec:?}"));
        }
        if c % groups != 0 || o % groups != 0 || cw != c / groups {
            return Err(dim_err!(
                "conv2d channel mismatch: input {:?}, weight {:?}, groups {groups}",
                self.shape(),
                weight.shape()
            ));
        }
        let (oh, ow) = match (spec.out_len(h, kh), spec.out_len(w, kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(dim_err!(
                    "conv2d output would be empty: input {:?}, kernel {kh}x{kw}, {spec:?}",
                    self.shape()
                ))
            }
        };
        let g = Geom {
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride: spec.stride,
            pad: spec.padding,
            dil: spec.dilation,
        };
        let (cg, og) = (c / groups, o / groups);
        let kg = cg * kh * kw;
        let p = oh * ow;
        let in_sz = c * h * w;
        let mut out = vec![T::zero(); b * o * p];
        {
            let (x, wt) = (self.data(), weight.data());
            let (x, wt): (&[T], &[T]) = (&x, &wt);
            let scratch = || if g.pointwise() { Vec::new() } else { vec![T::zero(); kg * p] };
            out.par_chunks_mut(o * p).enumerate().for_each_init(scratch, |col, (bi, out_b)| {
                let xb = &x[bi * in_sz..(bi + 1) * in_sz];
                for gi in 0..groups {
                    let cols: &[T] = if g.pointwise() {
                        &xb[gi * cg * p..(gi + 1) * cg * p]
                    } else {
                        g.im2col(xb, gi * cg, cg, col);
                        col
                    };
                    gemm(
                        og,
                        kg,
                        p,
                        MatRef::row_major(&wt[gi * og * kg..(gi + 1) * og * kg], kg),
                        MatRef::row_major(cols, p),
                        T::zero(),
                        &mut out_b[gi * og * p..(gi + 1) * og * p],
                        p,
                        1,
                    );
                }
            });
        }
        Ok(Tensor::from_op(
            vec![b, o, oh, ow],
            out,
            vec![self.clone(), weight.clone()],
            move |ctx| {
                let (px, pw) = (&ctx.parents[0], &ctx.parents[1]);
                let (x, wt) = (px.data(), pw.data());
                let (x, wt): (&[T], &[T]) = (&x, &wt);
                let gy = ctx.grad;
                let gx = px.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); b * in_sz];
                    let scratch = || if g.pointwise() { Vec::new() } else { vec![T::zero(); kg * p] };
                    gx.par_chunks_mut(in_sz).enumerate().for_each_init(scratch, |dcol, (bi, gx_b)| {
                        let gy_b = &gy[bi * o * p..(bi + 1) * o * p];
                        for gi in 0..groups {
                            let wg = MatRef::transposed(&wt[gi * og * kg..(gi + 1) * og * kg], kg);
                            let dy = MatRef::row_major(&gy_b[gi * og * p..(gi + 1) * og * p], p);
                            if g.pointwise() {
                                gemm(kg, og, p, wg, dy, T::zero(), &mut gx_b[gi * cg * p..(gi + 1) * cg * p], p, 1);
                            } else {
                                gemm(kg, og, p, wg, dy, T::zero(), dcol, p, 1);
                                g.col2im(dcol, gi * cg, cg, gx_b);
                            }
                        }
                    });
                    gx
                });
                let gw = pw.requires_grad().then(|| {
                    // per-image partials, reduced in batch order for determinism
                    let scratch = || if g.pointwise() { Vec::new() } else { vec![T::zero(); kg * p] };
                    let partials: Vec<Vec<T>> = (0..b)
                        .into_par_iter()
                        .map_init(scratch, |col, bi| {
                            let xb = &x[bi * in_sz..(bi + 1) * in_sz];
                            let gy_b = &gy[bi * o * p..(bi + 1) * o * p];
                            let mut gw_b = vec![T::zero(); o * kg];
                            for gi in 0..groups {
                                let cols: &[T] = if g.pointwise() {
                                    &xb[gi * cg * p..(gi + 1) * cg * p]
                                } else {
                                    g.im2col(xb, gi * cg, cg, col);
                                    col
                                };
                                gemm(
                                    og,
                                    p,
                                    kg,
                                    MatRef::row_major(&gy_b[gi * og * p..(gi + 1) * og * p], p),
                                    MatRef::transposed(cols, p),
                                    T::zero(),
                                    &mut gw_b[gi * og * kg..(gi + 1) * og * kg],
                                    kg,
                                    1,
                                );
                            }
                            gw_b
                        })
                        .collect();
                    let mut gw = vec![T::zero(); o * kg];
                    for part in &partials {
                        gw.iter_mut().zip(part).for_each(|(a, &v)| *a = *a + v);
                    }
                    gw
                });
                let _ = wt;
                vec![gx, gw]
            },
        ))
    }

    /// Max pooling with implicit `-inf` padding. The subgradient routes to
    /// the first (lowest flat index) maximum of each window.
    pub fn max_pool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let [b, c, h, w] = dims4(self.shape(), "max_pool2d")?;
        let spec = Conv2dSpec::new(stride.max(1), padding, 1);
        let (oh, ow) = pool_out(&spec, h, w, kernel, padding)?;
        let planes = b * c;
        let mut out = vec![T::zero(); planes * oh * ow];
        let mut arg = vec![0usize; planes * oh * ow];
        {
            let x = self.data();
            for pl in 0..planes {
                let src = &x[pl * h * w..(pl + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best: Option<(T, usize)> = None;
                        for ki in 0..kernel {
                            let iy = (oy * stride + ki) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..kernel {
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = iy as usize * w + ix as usize;
                                let v = src[idx];
                                if best.is_none_or(|(bv, bi)| v > bv || (v == bv && idx < bi)) {
                                    best = Some((v, idx));
                                }
                            }
                        }
                        let (v, idx) = best.ok_or_else(|| dim_err!("max_pool2d window covers only padding"))?;
                        let o = (pl * oh + oy) * ow + ox;
                        out[o] = v;
                        arg[o] = pl * h * w + idx;
                    }
                }
            }
        }
        let n = self.numel();
        Ok(Tensor::from_op(vec![b, c, oh, ow], out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); n];
            for (&i, &v) in arg.iter().zip(ctx.grad) {
                g[i] = g[i] + v;
            }
            vec![Some(g)]
        }))
    }

    /// Mean pooling with implicit padding; each window averages only the
    /// positions inside the input, so output extents follow the conv formula.
    pub fn avg_pool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let [b, c, h, w] = dims4(self.shape(), "avg_pool2d")?;
        let spec = Conv2dSpec::new(stride.max(1), padding, 1);
        let (oh, ow) = pool_out(&spec, h, w, kernel, padding)?;
        let planes = b * c;
        let range = |o: usize, len: usize| {
            let lo = (o * stride) as isize - padding as isize;
            let hi = (lo + kernel as isize).min(len as isize);
            (lo.max(0) as usize, hi.max(0) as usize)
        };
        let mut windows = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, y1) = range(oy, h);
                let (x0, x1) = range(ox, w);
                if y1 <= y0 || x1 <= x0 {
                    return Err(dim_err!("avg_pool2d window covers only padding"));
                }
                let inv = T::one() / T::c(((y1 - y0) * (x1 - x0)) as f64);
                windows.push((y0, y1, x0, x1, inv));
            }
        }
        let mut out = vec![T::zero(); planes * oh * ow];
        {
            let x = self.data();
            for pl in 0..planes {
                let src = &x[pl * h * w..(pl + 1) * h * w];
                for (k, &(y0, y1, x0, x1, inv)) in windows.iter().enumerate() {
                    let mut s = T::zero();
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s = s + src[y * w + x];
                        }
                    }
                    out[pl * oh * ow + k] = s * inv;
                }
            }
        }
        Ok(Tensor::from_op(vec![b, c, oh, ow], out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); planes * h * w];
            for pl in 0..planes {
                for (k, &(y0, y1, x0, x1, inv)) in windows.iter().enumerate() {
                    let gv = ctx.grad[pl * oh * ow + k] * inv;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let i = pl * h * w + y * w + x;
                            g[i] = g[i] + gv;
                        }
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Mean over the spatial dimensions: `[B, C, H, W] → [B, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let [b, c, h, w] = dims4(self.shape(), "global_avg_pool")?;
        self.reshape(&[b, c, h * w])?.mean_axis(2)
    }
}

fn pool_out(spec: &Conv2dSpec, h: usize, w: usize, kernel: usize, padding: usize) -> Result<(usize, usize)> {
    if kernel == 0 || kernel > h + 2 * padding || kernel > w + 2 * padding {
        return Err(dim_err!(
            "pool kernel {kernel} does not fit a {h}x{w} input with padding {padding}"
        ));
    }
    match (spec.out_len(h, kernel), spec.out_len(w, kernel)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(dim_err!("pooling window is empty")),
    }
}
