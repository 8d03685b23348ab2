//! Image-space operations: bilinear resize, RoI-align cropping, horizontal
//! flip, and eye boxes from landmarks.
//!
//! Coordinates are continuous pixel coordinates: pixel `j` covers
//! `[j, j + 1)` and its center sits at `j + 0.5`. Sampling at continuous
//! coordinate `x` interpolates around index `x - 0.5`, with edge clamping.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Axis-aligned box in source-image pixel coordinates (fractional allowed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RoiBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = RoiBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        if !finite || self.x1 <= self.x0 || self.y1 <= self.y0 {
            return Err(Error::Input(format!("degenerate RoI box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Mirror image of the box under a horizontal flip of an image `width` wide.
    pub fn mirrored(&self, width: f64) -> Self {
        RoiBox {
            x0: width - self.x1,
            y0: self.y0,
            x1: width - self.x0,
            y1: self.y1,
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        RoiBox {
            x0: self.x0 * sx,
            y0: self.y0 * sy,
            x1: self.x1 * sx,
            y1: self.y1 * sy,
        }
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width && self.y1 <= height
    }
}

/// Interpolation taps along one axis for continuous coordinate `x` (in
/// pixel units, centers at `j + 0.5`) on an axis of `len` pixels.
fn taps(x: f64, len: usize) -> (usize, usize, f64) {
    let u = (x - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, u - i0 as f64)
}

/// A sparse linear map from input pixels of one plane to output pixels of
/// one plane, shared by every channel.
struct Resampler<T> {
    in_plane: usize,
    out_plane: usize,
    /// `(out_index, in_index, weight)`, grouped by output index.
    entries: Vec<(usize, usize, T)>,
}

impl<T: Real> Resampler<T> {
    fn apply(&self, x: &[T], planes: usize) -> Vec<T> {
        let mut out = vec![T::zero(); planes * self.out_plane];
        for p in 0..planes {
            let src = &x[p * self.in_plane..(p + 1) * self.in_plane];
            let dst = &mut out[p * self.out_plane..(p + 1) * self.out_plane];
            for &(o, i, w) in &self.entries {
                dst[o] = dst[o] + w * src[i];
            }
        }
        out
    }

    fn adjoint(&self, g: &[T], planes: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); planes * self.in_plane];
        for p in 0..planes {
            let src = &g[p * self.out_plane..(p + 1) * self.out_plane];
            let dst = &mut dx[p * self.in_plane..(p + 1) * self.in_plane];
            for &(o, i, w) in &self.entries {
                dst[i] = dst[i] + w * src[o];
            }
        }
        dx
    }

    /// Bilinear taps at the continuous point `(x, y)` for output pixel `o`,
    /// scaled by `scale`.
    fn push_point(&mut self, o: usize, x: f64, y: f64, h: usize, w: usize, scale: f64) {
        let (y0, y1, fy) = taps(y, h);
        let (x0, x1, fx) = taps(x, w);
        for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                self.entries.push((o, yi * w + xi, T::c(wy * wx * scale)));
            }
        }
    }
}

fn run_resampler<T: Real>(x: &Tensor<T>, planes: usize, out_shape: Vec<usize>, r: Resampler<T>) -> Tensor<T> {
    let out = r.apply(&x.data(), planes);
    let r = Rc::new(r);
    Tensor::from_op(out_shape, out, vec![x.clone()], move |ctx| vec![Some(r.adjoint(ctx.grad, planes))])
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        [b, c, h, w] => Ok((b * c, h, w)),
        _ => Err(dim_err!("expected [C, H, W] or [B, C, H, W], got {shape:?}")),
    }
}

/// Bilinear resize with half-pixel centers
/// (`src = (i + 0.5)·in/out − 0.5`) and edge clamping. Accepts `[C, H, W]`
/// or `[B, C, H, W]`; differentiable.
pub fn bilinear_resize<T: Real>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(dim_err!("resize target must be at least 1x1, got {out_h}x{out_w}"));
    }
    let (planes, h, w) = image_dims(img.shape())?;
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut r = Resampler {
        in_plane: h * w,
        out_plane: out_h * out_w,
        entries: Vec::with_capacity(out_h * out_w * 4),
    };
    for i in 0..out_h {
        for j in 0..out_w {
            // continuous coordinate whose interpolation index is (i+0.5)·s − 0.5
            let y = (i as f64 + 0.5) * sy;
            let x = (j as f64 + 0.5) * sx;
            r.push_point(i * out_w + j, x, y, h, w, 1.0);
        }
    }
    let mut shape = img.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = out_h;
    shape[n - 1] = out_w;
    Ok(run_resampler(img, planes, shape, r))
}

fn roi_resampler<T: Real>(
    h: usize,
    w: usize,
    b: &RoiBox,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<Resampler<T>> {
    b.validate()?;
    if out_h == 0 || out_w == 0 || samples_per_bin == 0 {
        return Err(dim_err!(
            "roi_align needs positive output size and samples, got {out_h}x{out_w}, {samples_per_bin} samples"
        ));
    }
    let s = samples_per_bin;
    let (bin_h, bin_w) = (b.height() / out_h as f64, b.width() / out_w as f64);
    let scale = 1.0 / (s * s) as f64;
    let mut r = Resampler {
        in_plane: h * w,
        out_plane: out_h * out_w,
        entries: Vec::with_capacity(out_h * out_w * s * s * 4),
    };
    for i in 0..out_h {
        for j in 0..out_w {
            for sy in 0..s {
                let y = b.y0 + (i as f64 + (sy as f64 + 0.5) / s as f64) * bin_h;
                for sx in 0..s {
                    let x = b.x0 + (j as f64 + (sx as f64 + 0.5) / s as f64) * bin_w;
                    r.push_point(i * out_w + j, x, y, h, w, scale);
                }
            }
        }
    }
    Ok(r)
}

/// RoI align of one `[C, H, W]` feature map: the box is split into
/// `out_h × out_w` bins, each averaging `samples_per_bin²` regularly spaced
/// bilinear samples. Differentiable w.r.t. the feature map.
pub fn roi_align<T: Real>(
    feat: &Tensor<T>,
    roi: &RoiBox,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = match *feat.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(dim_err!("roi_align expects [C, H, W], got {:?}", feat.shape())),
    };
    let r = roi_resampler(h, w, roi, out_h, out_w, samples_per_bin)?;
    Ok(run_resampler(feat, c, vec![c, out_h, out_w], r))
}

/// RoI align over a batch: box `i` is cropped from image `i` of `[B, C, H, W]`.
pub fn roi_align_batch<T: Real>(
    feat: &Tensor<T>,
    boxes: &[RoiBox],
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = match *feat.shape() {
        [b, c, h, w] => [b, c, h, w],
        _ => return Err(dim_err!("roi_align_batch expects [B, C, H, W], got {:?}", feat.shape())),
    };
    if boxes.len() != b {
        return Err(Error::Input(format!("{} boxes for a batch of {b}", boxes.len())));
    }
    let samplers = boxes
        .iter()
        .map(|bx| roi_resampler::<T>(h, w, bx, out_h, out_w, samples_per_bin))
        .collect::<Result<Vec<_>>>()?;
    let (in_sz, out_sz) = (c * h * w, c * out_h * out_w);
    let mut out = Vec::with_capacity(b * out_sz);
    {
        let x = feat.data();
        for (i, r) in samplers.iter().enumerate() {
            out.extend(r.apply(&x[i * in_sz..(i + 1) * in_sz], c));
        }
    }
    let samplers = Rc::new(samplers);
    Ok(Tensor::from_op(vec![b, c, out_h, out_w], out, vec![feat.clone()], move |ctx| {
        let mut dx = Vec::with_capacity(b * in_sz);
        for (i, r) in samplers.iter().enumerate() {
            dx.extend(r.adjoint(&ctx.grad[i * out_sz..(i + 1) * out_sz], c));
        }
        vec![Some(dx)]
    }))
}

/// Reverses the column order of `[C, H, W]` or `[B, C, H, W]`.
pub fn hflip_image<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = image_dims(img.shape())?;
    let index: Vec<usize> = (0..planes * h)
        .flat_map(|row| (0..w).rev().map(move |j| row * w + j))
        .collect();
    img.gather_flat(Rc::new(index), img.shape())
}

/// Corner landmarks of one eye, in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeCorners {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

/// Square box centered on the corner midpoint with side
/// `(1 + margin)·|a − b|`, shifted to fit inside the image when it can,
/// otherwise clipped.
pub fn eye_box(corners: &EyeCorners, margin: f64, width: f64, height: f64) -> Result<RoiBox> {
    let (mut a, mut b) = (corners.a, corners.b);
    if (b.0, b.1) < (a.0, a.1) {
        std::mem::swap(&mut a, &mut b);
    }
    let dist = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    if !(dist > 0.0) {
        return Err(Error::Input(format!("coincident eye corners at {a:?}")));
    }
    let side = (1.0 + margin) * dist;
    let (cx, cy) = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
    let fit = |center: f64, limit: f64| -> (f64, f64) {
        if side >= limit {
            return (0.0, limit);
        }
        let lo = (center - side / 2.0).clamp(0.0, limit - side);
        (lo, lo + side)
    };
    let (x0, x1) = fit(cx, width);
    let (y0, y1) = fit(cy, height);
    RoiBox::new(x0, y0, x1, y1)
}

/// Boxes for both eyes, returned left-to-right in image coordinates.
pub fn landmarks_to_eye_boxes(
    first: &EyeCorners,
    second: &EyeCorners,
    margin: f64,
    width: f64,
    height: f64,
) -> Result<(RoiBox, RoiBox)> {
    let b1 = eye_box(first, margin, width, height)?;
    let b2 = eye_box(second, margin, width, height)?;
    if b1.x0 + b1.x1 <= b2.x0 + b2.x1 {
        Ok((b1, b2))
    } else {
        Ok((b2, b1))
    }
}
