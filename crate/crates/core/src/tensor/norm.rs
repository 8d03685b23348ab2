use super::{check_axis, split_axis, Real, Tensor};
use crate::error::{dim_err, Result};

/// Normalizes `rows` contiguous segments of length `len` and applies an
/// affine map. Each row is a run of `len / seg` chunks of `seg` values that
/// share one gain/bias entry; chunk `j` of row `r` uses entry `base(r) + j`.
/// Returns the output, the normalized values and the inverse std per row.
fn normalize_rows<T: Real>(
    x: &[T],
    rows: usize,
    len: usize,
    seg: usize,
    eps: T,
    gain: &[T],
    bias: &[T],
    base: impl Fn(usize) -> usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::c(len as f64);
    let mut out = vec![T::zero(); rows * len];
    let mut xhat = vec![T::zero(); rows * len];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        let b0 = base(r);
        let xh_row = &mut xhat[r * len..(r + 1) * len];
        let out_row = &mut out[r * len..(r + 1) * len];
        for (j, ((xs, hs), os)) in row
            .chunks_exact(seg)
            .zip(xh_row.chunks_exact_mut(seg))
            .zip(out_row.chunks_exact_mut(seg))
            .enumerate()
        {
            let (ga, bi) = (gain[b0 + j], bias[b0 + j]);
            for ((&v, h), o) in xs.iter().zip(hs.iter_mut()).zip(os.iter_mut()) {
                let xh = (v - mean) * is;
                *h = xh;
                *o = xh * ga + bi;
            }
        }
    }
    (out, xhat, inv_std)
}

/// Backward of [`normalize_rows`]: returns (dx, dgain, dbias).
#[allow(clippy::too_many_arguments)]
fn normalize_rows_backward<T: Real>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    rows: usize,
    len: usize,
    seg: usize,
    gain: &[T],
    channels: usize,
    base: impl Fn(usize) -> usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::c(len as f64);
    let mut dx = vec![T::zero(); rows * len];
    let mut dgain = vec![T::zero(); channels];
    let mut dbias = vec![T::zero(); channels];
    for r in 0..rows {
        let (gr, xr) = (&g[r * len..(r + 1) * len], &xhat[r * len..(r + 1) * len]);
        let b0 = base(r);
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for (j, (gs, xs)) in gr.chunks_exact(seg).zip(xr.chunks_exact(seg)).enumerate() {
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for (&gv, &xv) in gs.iter().zip(xs) {
                sg = sg + gv;
                sgx = sgx + gv * xv;
            }
            let ga = gain[b0 + j];
            dbias[b0 + j] = dbias[b0 + j] + sg;
            dgain[b0 + j] = dgain[b0 + j] + sgx;
            sum_d = sum_d + sg * ga;
            sum_dx = sum_dx + sgx * ga;
        }
        let (mean_d, mean_dx, is) = (sum_d / n, sum_dx / n, inv_std[r]);
        let dr = &mut dx[r * len..(r + 1) * len];
        for (j, ((ds, gs), xs)) in dr
            .chunks_exact_mut(seg)
            .zip(gr.chunks_exact(seg))
            .zip(xr.chunks_exact(seg))
            .enumerate()
        {
            let ga = gain[b0 + j];
            for ((d, &gv), &xv) in ds.iter_mut().zip(gs).zip(xs) {
                *d = is * (gv * ga - mean_d - xv * mean_dx);
            }
        }
    }
    (dx, dgain, dbias)
}

impl<T: Real> Tensor<T> {
    /// Zero-mean, unit-variance normalization over the last dimension,
    /// followed by an elementwise affine map.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = *self.shape().last().expect("tensors have rank ≥ 1");
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(dim_err!(
                "layer_norm over last dim {d}: gain {:?}, bias {:?}",
                gain.shape(),
                bias.shape()
            ));
        }
        let rows = self.numel() / d;
        let (out, xhat, inv_std) =
            normalize_rows(&self.data(), rows, d, 1, T::c(eps), &gain.data(), &bias.data(), |_| 0);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |ctx| {
                let gain = ctx.parents[1].data();
                let (dx, dg, db) = normalize_rows_backward(ctx.grad, &xhat, &inv_std, rows, d, 1, &gain, d, |_| 0);
                vec![Some(dx), Some(dg), Some(db)]
            },
        ))
    }

    /// Group normalization of `[B, C, H, W]`: statistics over each group of
    /// `C / groups` channels and all spatial positions, then a per-channel
    /// affine map. Independent of the batch composition.
    pub fn group_norm(&self, groups: usize, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let [b, c, h, w] = match *self.shape() {
            [b, c, h, w] => [b, c, h, w],
            _ => return Err(dim_err!("group_norm expects [B, C, H, W], got {:?}", self.shape())),
        };
        if groups == 0 || c % groups != 0 || gain.shape() != [c] || bias.shape() != [c] {
            return Err(dim_err!(
                "group_norm: {c} channels, {groups} groups, gain {:?}, bias {:?}",
                gain.shape(),
                bias.shape()
            ));
        }
        let cg = c / groups;
        let hw = h * w;
        let rows = b * groups;
        let len = cg * hw;
        let channel = move |r: usize| (r % groups) * cg;
        let (out, xhat, inv_std) =
            normalize_rows(&self.data(), rows, len, hw, T::c(eps), &gain.data(), &bias.data(), channel);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |ctx| {
                let gain = ctx.parents[1].data();
                let (dx, dg, db) = normalize_rows_backward(ctx.grad, &xhat, &inv_std, rows, len, hw, &gain, c, channel);
                vec![Some(dx), Some(dg), Some(db)]
            },
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| out[at(k)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for k in 0..n {
                    let e = (out[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum = sum + e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / sum;
                }
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |ctx| {
            let (y, g) = (ctx.out, ctx.grad);
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot = (0..n).fold(T::zero(), |a, k| a + g[at(k)] * y[at(k)]);
                    for k in 0..n {
                        dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let y = t(&[2], &[0.0, 0.0]).softmax(0).unwrap().to_vec();
        assert_eq!(y, vec![0.5, 0.5]);
        let y = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).softmax(0).unwrap().to_vec();
        for (a, b) in y.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = t(&[2, 3, 2], &(0..12).map(|v| f64::from(v) * 0.3).collect::<Vec<_>>());
        let y = x.softmax(1).unwrap().to_vec();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|k| y[(o * 3 + k) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let one = t(&[3], &[1.0; 3]);
        let zero = t(&[3], &[0.0; 3]);
        let y = t(&[3], &[4.0; 3]).layer_norm(&one, &zero, 1e-5).unwrap().to_vec();
        assert_eq!(y, vec![0.0; 3]);
        let y = t(&[3], &[1.0, 2.0, 3.0]).layer_norm(&one, &zero, 0.0).unwrap().to_vec();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(t(&[2, 4], &[0.0; 8]).layer_norm(&one, &zero, 1e-5).is_err());
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let x = t(&[1, 4, 2, 2], &(0..16).map(|v| f64::from(v * v)).collect::<Vec<_>>());
        let y = x
            .group_norm(2, &t(&[4], &[1.0; 4]), &t(&[4], &[0.0; 4]), 0.0)
            .unwrap()
            .to_vec();
        for g in 0..2 {
            let seg = &y[g * 8..(g + 1) * 8];
            let mean: f64 = seg.iter().sum::<f64>() / 8.0;
            let var: f64 = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }
}
