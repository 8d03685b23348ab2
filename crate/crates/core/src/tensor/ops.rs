use std::rc::Rc;

use super::{check_axis, numel, split_axis, Real, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

/// Broadcast result shape for two tensors of equal rank.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(dim_err!("cannot broadcast {a:?} with {b:?}: ranks differ"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(dim_err!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_bcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let sa = bcast_strides(a, out);
    let sb = bcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel(out) {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

impl<T: Real> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let same = self.shape() == other.shape();
        let data = {
            let (a, b) = (self.data(), other.data());
            let apply = |x: T, y: T| match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
            };
            if same {
                a.iter().zip(b.iter()).map(|(&x, &y)| apply(x, y)).collect()
            } else {
                let mut out = vec![T::zero(); numel(&out_shape)];
                for_each_bcast(&out_shape, self.shape(), other.shape(), |o, i, j| {
                    out[o] = apply(a[i], b[j])
                });
                out
            }
        };
        let (sa, sb, so) = (self.shape().to_vec(), other.shape().to_vec(), out_shape.clone());
        Ok(Tensor::from_op(out_shape, data, vec![self.clone(), other.clone()], move |ctx| {
            let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
            let g = ctx.grad;
            let mut ga = pa.requires_grad().then(|| vec![T::zero(); numel(&sa)]);
            let mut gb = pb.requires_grad().then(|| vec![T::zero(); numel(&sb)]);
            let (a, b) = (pa.data(), pb.data());
            if sa == sb {
                match op {
                    BinOp::Add => {
                        ga = ga.map(|_| g.to_vec());
                        gb = gb.map(|_| g.to_vec());
                    }
                    BinOp::Sub => {
                        ga = ga.map(|_| g.to_vec());
                        gb = gb.map(|_| g.iter().map(|&x| -x).collect());
                    }
                    BinOp::Mul => {
                        ga = ga.map(|_| g.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect());
                        gb = gb.map(|_| g.iter().zip(a.iter()).map(|(&x, &y)| x * y).collect());
                    }
                }
            } else {
                for_each_bcast(&so, &sa, &sb, |o, i, j| {
                    let (da, db) = match op {
                        BinOp::Add => (g[o], g[o]),
                        BinOp::Sub => (g[o], -g[o]),
                        BinOp::Mul => (g[o] * b[j], g[o] * a[i]),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[i] = ga[i] + da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] = gb[j] + db;
                    }
                });
            }
            vec![ga, gb]
        }))
    }

    /// Elementwise sum with same-rank broadcasting over size-1 dimensions.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Mul)
    }

    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Tensor<T> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            let x = ctx.parents[0].data();
            let g = ctx
                .grad
                .iter()
                .zip(x.iter().zip(ctx.out))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::c(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::c(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(|x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |a, &b| a + b);
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    /// Sums over `axis`, removing it (rank-1 inputs reduce to shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for k in 0..n {
                    let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                }
            }
        }
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    g[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&ctx.grad[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(g)]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        let n = self.shape()[axis];
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(dim_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |ctx| vec![Some(ctx.grad.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!(
                "invalid permutation {perm:?} for shape {:?}",
                self.shape()
            ));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        // source offset of each output element, in output order
        let mut src_index = Vec::with_capacity(self.numel());
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..self.numel() {
            src_index.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        let data = {
            let x = self.data();
            src_index.iter().map(|&i| x[i]).collect()
        };
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); src_index.len()];
            for (o, &i) in src_index.iter().enumerate() {
                g[i] = ctx.grad[o];
            }
            vec![Some(g)]
        }))
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn cat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| dim_err!("cat of zero tensors"))?;
        check_axis(first.shape(), axis)?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(dim_err!(
                    "cat along axis {axis}: shape {:?} incompatible with {:?}",
                    p.shape(),
                    first.shape()
                ));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let views: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (v, &len) in views.iter().zip(&lens) {
                    data.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(shape, data, parts.to_vec(), move |ctx| {
            let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &len) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&ctx.grad[off..off + len * inner]);
                    off += len * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| dim_err!("stack of zero tensors"))?;
        let mut shape = vec![1];
        shape.extend_from_slice(first.shape());
        let expanded = parts
            .iter()
            .map(|p| p.reshape(&[&[1][..], p.shape()].concat()))
            .collect::<Result<Vec<_>>>()?;
        let out = Tensor::cat(&expanded, 0)?;
        debug_assert_eq!(out.shape()[1..], shape[1..]);
        Ok(out)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        if len == 0 || start + len > n {
            return Err(dim_err!(
                "narrow [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                self.shape()
            ));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                data.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                g[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        }))
    }

    /// `out[i] = self.flat[index[i]]`, reshaped to `shape`. Gradients
    /// scatter-add back to the gathered positions.
    pub fn gather_flat(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != index.len() {
            return Err(dim_err!(
                "gather: {} indices cannot fill shape {shape:?}",
                index.len()
            ));
        }
        let n = self.numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(dim_err!("gather index {bad} out of range for {n} elements"));
        }
        let data = {
            let x = self.data();
            index.iter().map(|&i| x[i]).collect()
        };
        Ok(Tensor::from_op(shape.to_vec(), data, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); n];
            for (&i, &v) in index.iter().zip(ctx.grad) {
                g[i] = g[i] + v;
            }
            vec![Some(g)]
        }))
    }

    /// Per-sample L1 loss for `[B, D]` predictions: mean absolute difference
    /// over the `D` components. The subgradient of |·| at 0 is 0.
    pub fn l1_per_sample(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != target.shape() || self.rank() != 2 {
            return Err(dim_err!(
                "l1 loss needs equal [B, D] shapes, got {:?} and {:?}",
                self.shape(),
                target.shape()
            ));
        }
        let (b, d) = (self.shape()[0], self.shape()[1]);
        let inv = T::one() / T::c(d as f64);
        let data = {
            let (p, t) = (self.data(), target.data());
            (0..b)
                .map(|i| (0..d).fold(T::zero(), |acc, j| acc + (p[i * d + j] - t[i * d + j]).abs()) * inv)
                .collect()
        };
        Ok(Tensor::from_op(vec![b], data, vec![self.clone(), target.clone()], move |ctx| {
            let (p, t) = (ctx.parents[0].data(), ctx.parents[1].data());
            let gp: Vec<T> = (0..b * d)
                .map(|k| {
                    let diff = p[k] - t[k];
                    let s = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    ctx.grad[k / d] * inv * s
                })
                .collect();
            let gt = ctx.parents[1]
                .requires_grad()
                .then(|| gp.iter().map(|&x| -x).collect());
            vec![Some(gp), gt]
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
    fn relu_clamps_negatives() {
        assert_eq!(t(&[3], &[-1.0, 0.0, 2.0]).relu().to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcast_add_and_grad_reduction() {
        let a = Tensor::<f64>::parameter(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::<f64>::parameter(&[1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let y = a.add(&b).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn broadcast_mul_grad() {
        let a = Tensor::<f64>::parameter(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::parameter(&[2, 1], vec![10.0, 100.0]).unwrap();
        a.mul(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![10.0, 10.0, 100.0, 100.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn incompatible_broadcast_is_an_error() {
        assert!(t(&[2, 3], &[0.0; 6]).add(&t(&[2, 2], &[0.0; 4])).is_err());
        assert!(t(&[3], &[0.0; 3]).add(&t(&[1, 3], &[0.0; 3])).is_err());
    }

    #[test]
    fn permute_transposes() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn cat_and_narrow_are_inverse() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::cat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.narrow(1, 1, 2).unwrap().to_vec(), b.to_vec());
        assert_eq!(c.narrow(1, 0, 1).unwrap().to_vec(), a.to_vec());
        assert!(c.narrow(1, 2, 2).is_err());
    }

    #[test]
    fn sum_axis_middle() {
        let x = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(x.sum_axis(1).unwrap().to_vec(), vec![4.0, 6.0, 12.0, 14.0]);
        assert!(x.sum_axis(3).is_err());
    }

    #[test]
    fn l1_loss_examples() {
        let p = t(&[1, 2], &[1.0, 2.0]);
        let z = t(&[1, 2], &[0.0, 0.0]);
        assert_eq!(p.l1_per_sample(&z).unwrap().to_vec(), vec![1.5]);
        assert_eq!(p.l1_per_sample(&p).unwrap().to_vec(), vec![0.0]);
        assert!(p.l1_per_sample(&t(&[2, 1], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        let p = Tensor::<f64>::parameter(&[1, 2], vec![0.0, 3.0]).unwrap();
        let z = t(&[1, 2], &[0.0, 1.0]);
        p.l1_per_sample(&z).unwrap().sum_all().backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![0.0, 0.5]);
    }

    #[test]
    fn gather_scatters_gradients() {
        let x = Tensor::<f64>::parameter(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.gather_flat(Rc::new(vec![2, 0, 2]), &[3]).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 1.0, 3.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 2.0]);
    }
}
