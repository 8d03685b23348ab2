use super::{gemm, MatRef, Real, Tensor};
use crate::error::{dim_err, Result};

/// Operand layout of one batch slice: rows, cols of the *stored* matrix.
#[derive(Clone, Copy)]
struct Operand {
    rows: usize,
    cols: usize,
    trans: bool,
}

impl Operand {
    /// Dimensions after the optional transpose.
    fn logical(self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn view<'a, T>(self, data: &'a [T]) -> MatRef<'a, T> {
        let m = MatRef::row_major(data, self.cols);
        if self.trans {
            m.t()
        } else {
            m
        }
    }
}

fn batch_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [r, c] => Ok((1, r, c)),
        [b, r, c] => Ok((b, r, c)),
        _ => Err(dim_err!("matmul operands must be rank 2 or 3, got {shape:?}")),
    }
}

impl<T: Real> Tensor<T> {
    /// Matrix product `[M×K]·[K×N]`, or its batched form `[B×M×K]·[B×K×N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with either operand optionally transposed in its last
    /// two dimensions. Transposes are folded into strides, not copied.
    pub fn matmul_t(&self, other: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
        let (ba, ra, ca) = batch_dims(self.shape())?;
        let (bb, rb, cb) = batch_dims(other.shape())?;
        let a = Operand { rows: ra, cols: ca, trans: trans_a };
        let b = Operand { rows: rb, cols: cb, trans: trans_b };
        let (m, k) = a.logical();
        let (k2, n) = b.logical();
        if k != k2 || ba != bb || self.rank() != other.rank() {
            return Err(dim_err!(
                "matmul shape mismatch: {:?}{} x {:?}{}",
                self.shape(),
                if trans_a { "ᵀ" } else { "" },
                other.shape(),
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let batch = ba;
        let (sa, sb, sc) = (ra * ca, rb * cb, m * n);
        let mut out = vec![T::zero(); batch * sc];
        {
            let (x, y) = (self.data(), other.data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    a.view(&x[i * sa..(i + 1) * sa]),
                    b.view(&y[i * sb..(i + 1) * sb]),
                    T::zero(),
                    &mut out[i * sc..(i + 1) * sc],
                    n,
                    1,
                );
            }
        }
        let shape = if self.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(Tensor::from_op(shape, out, vec![self.clone(), other.clone()], move |ctx| {
            let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
            let g = ctx.grad;
            let (x, y) = (pa.data(), pb.data());
            let ga = pa.requires_grad().then(|| {
                // d op(A) = dC · op(B)ᵀ, written through A's own layout
                let mut ga = vec![T::zero(); batch * sa];
                for i in 0..batch {
                    let (rsc, csc) = if a.trans { (1, ca) } else { (ca, 1) };
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(&g[i * sc..(i + 1) * sc], n),
                        b.view(&y[i * sb..(i + 1) * sb]).t(),
                        T::zero(),
                        &mut ga[i * sa..(i + 1) * sa],
                        rsc,
                        csc,
                    );
                }
                ga
            });
            let gb = pb.requires_grad().then(|| {
                // d op(B) = op(A)ᵀ · dC
                let mut gb = vec![T::zero(); batch * sb];
                for i in 0..batch {
                    let (rsc, csc) = if b.trans { (1, cb) } else { (cb, 1) };
                    gemm(
                        k,
                        m,
                        n,
                        a.view(&x[i * sa..(i + 1) * sa]).t(),
                        MatRef::row_major(&g[i * sc..(i + 1) * sc], n),
                        T::zero(),
                        &mut gb[i * sb..(i + 1) * sb],
                        rsc,
                        csc,
                    );
                }
                gb
            });
            vec![ga, gb]
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
    fn identity_times_matrix() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(eye.matmul(&m).unwrap().to_vec(), m.to_vec());
    }

    #[test]
    fn row_times_column() {
        let r = t(&[1, 2], &[1.0, 2.0]);
        let c = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(r.matmul(&c).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let err = t(&[2, 3], &[0.0; 6]).matmul(&t(&[2, 3], &[0.0; 6])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_operands_match_explicit_permute() {
        let a = t(&[2, 3, 2], &(0..12).map(|v| v as f64 * 0.5 - 2.0).collect::<Vec<_>>());
        let b = t(&[2, 4, 2], &(0..16).map(|v| (v as f64).sin()).collect::<Vec<_>>());
        let lhs = a.matmul_t(&b, false, true).unwrap();
        let rhs = a.matmul(&b.permute(&[0, 2, 1]).unwrap()).unwrap();
        assert_eq!(lhs.shape(), &[2, 3, 4]);
        for (x, y) in lhs.to_vec().iter().zip(rhs.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
