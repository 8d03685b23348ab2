use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{LayerNorm, Linear, Mlp, Module};
use crate::error::{dim_err, Error, Result};
use crate::param::{join, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhsaConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub use_2d_relative_positions: bool,
}

impl MhsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Relative-position tables for an `h × w` token grid (shared by all heads).
struct RelPos<T: Real> {
    h: usize,
    w: usize,
    rel_h: Tensor<T>,
    rel_w: Tensor<T>,
    // gather indices for the last batch·heads size seen
    cache: RefCell<Option<(usize, Rc<Vec<usize>>, Rc<Vec<usize>>)>>,
}

impl<T: Real> RelPos<T> {
    /// Gathers `[BH·T, 2n−1]` per-axis logits into `[BH, T, T]` where entry
    /// `(t, s)` reads offset `pos(s) − pos(t) + n − 1`.
    fn index(bh: usize, h: usize, w: usize, vertical: bool) -> Vec<usize> {
        let t = h * w;
        let (n, coord): (usize, Box<dyn Fn(usize) -> usize>) = if vertical {
            (h, Box::new(move |p| p / w))
        } else {
            (w, Box::new(move |p| p % w))
        };
        let span = 2 * n - 1;
        let mut idx = Vec::with_capacity(bh * t * t);
        for b in 0..bh {
            for q in 0..t {
                let row = (b * t + q) * span;
                for k in 0..t {
                    idx.push(row + coord(k) + n - 1 - coord(q));
                }
            }
        }
        idx
    }
}

/// Multi-head scaled dot-product self-attention.
pub struct Mhsa<T: Real> {
    pub cfg: MhsaConfig,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    rel: Option<RelPos<T>>,
}

impl<T: Real> Mhsa<T> {
    /// `grid` gives the token layout `(h, w)` and is required when relative
    /// positions are enabled.
    pub fn new(store: &mut ParamStore<T>, prefix: &str, cfg: MhsaConfig, grid: Option<(usize, usize)>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let q = Linear::new(store, &join(prefix, "q"), d, d)?;
        let k = Linear::new(store, &join(prefix, "k"), d, d)?;
        let v = Linear::new(store, &join(prefix, "v"), d, d)?;
        let out = Linear::new(store, &join(prefix, "out"), d, d)?;
        let rel = if cfg.use_2d_relative_positions {
            let (h, w) = grid.ok_or_else(|| Error::Config(format!("{prefix}: relative positions need a token grid")))?;
            if h == 0 || w == 0 {
                return Err(Error::Config(format!("{prefix}: empty token grid {h}x{w}")));
            }
            let dh = cfg.head_dim();
            Some(RelPos {
                h,
                w,
                rel_h: store.weight(join(prefix, "rel_h"), &[2 * h - 1, dh], dh)?,
                rel_w: store.weight(join(prefix, "rel_w"), &[2 * w - 1, dh], dh)?,
                cache: RefCell::new(None),
            })
        } else {
            None
        };
        Ok(Mhsa { cfg, q, k, v, out, rel })
    }

    fn split_heads(&self, x: &Tensor<T>, b: usize, t: usize) -> Result<Tensor<T>> {
        let (h, dh) = (self.cfg.num_heads, self.cfg.head_dim());
        x.reshape(&[b, t, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, t, dh])
    }

    fn rel_logits(&self, rel: &RelPos<T>, q: &Tensor<T>, bh: usize, t: usize) -> Result<Tensor<T>> {
        let dh = self.cfg.head_dim();
        let flat = q.reshape(&[bh * t, dh])?;
        let (ih, iw) = {
            let mut cache = rel.cache.borrow_mut();
            match cache.as_ref() {
                Some((n, ih, iw)) if *n == bh => (ih.clone(), iw.clone()),
                _ => {
                    let ih = Rc::new(RelPos::<T>::index(bh, rel.h, rel.w, true));
                    let iw = Rc::new(RelPos::<T>::index(bh, rel.h, rel.w, false));
                    *cache = Some((bh, ih.clone(), iw.clone()));
                    (ih, iw)
                }
            }
        };
        let lh = flat.matmul_t(&rel.rel_h, false, true)?.gather_flat(ih, &[bh, t, t])?;
        let lw = flat.matmul_t(&rel.rel_w, false, true)?.gather_flat(iw, &[bh, t, t])?;
        lh.add(&lw)
    }

    /// Attention over `[B, T, d_model]` tokens.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.cfg.d_model;
        if x.rank() != 3 || x.shape()[2] != d {
            return Err(dim_err!("attention expects [B, T, {d}] tokens, got {:?}", x.shape()));
        }
        let (b, t) = (x.shape()[0], x.shape()[1]);
        if let Some(rel) = &self.rel {
            if rel.h * rel.w != t {
                return Err(dim_err!(
                    "attention built for a {}x{} grid got {t} tokens",
                    rel.h,
                    rel.w
                ));
            }
        }
        let h = self.cfg.num_heads;
        let q = self.split_heads(&self.q.forward(x)?, b, t)?;
        let k = self.split_heads(&self.k.forward(x)?, b, t)?;
        let v = self.split_heads(&self.v.forward(x)?, b, t)?;
        let mut logits = q.matmul_t(&k, false, true)?;
        if let Some(rel) = &self.rel {
            logits = logits.add(&self.rel_logits(rel, &q, b * h, t)?)?;
        }
        let attn = logits.scale(1.0 / (self.cfg.head_dim() as f64).sqrt()).softmax(2)?;
        let ctx = attn
            .matmul(&v)?
            .reshape(&[b, h, t, self.cfg.head_dim()])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, d])?;
        self.out.forward(&ctx)
    }

    /// Attention over the spatial positions of a `[B, C, H, W]` map.
    pub fn forward_spatial(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 {
            return Err(dim_err!("spatial attention expects [B, C, H, W], got {:?}", x.shape()));
        }
        let (b, c, hh, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let tokens = x.reshape(&[b, c, hh * ww])?.permute(&[0, 2, 1])?;
        self.forward(&tokens)?.permute(&[0, 2, 1])?.reshape(&[b, c, hh, ww])
    }
}

/// Post-norm encoder layer: `x ← LN(x + MHSA(x))`, then `x ← LN(x + FF(x))`.
pub struct TransformerEncoderLayer<T: Real> {
    pub attn: Mhsa<T>,
    pub norm1: LayerNorm<T>,
    pub ff: Mlp<T>,
    pub norm2: LayerNorm<T>,
}

impl<T: Real> TransformerEncoderLayer<T> {
    pub fn new(store: &mut ParamStore<T>, prefix: &str, cfg: MhsaConfig, ff_hidden: usize) -> Result<Self> {
        let d = cfg.d_model;
        Ok(TransformerEncoderLayer {
            attn: Mhsa::new(store, &join(prefix, "attn"), cfg, None)?,
            norm1: LayerNorm::new(store, &join(prefix, "norm1"), d)?,
            ff: Mlp::new(store, &join(prefix, "ff"), &[d, ff_hidden, d])?,
            norm2: LayerNorm::new(store, &join(prefix, "norm2"), d)?,
        })
    }
}

impl<T: Real> Module<T> for TransformerEncoderLayer<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.norm1.forward(&x.add(&self.attn.forward(x)?)?)?;
        self.norm2.forward(&x.add(&self.ff.forward(&x)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_all;
    use crate::tensor::no_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cfg(d: usize, h: usize, rel: bool) -> MhsaConfig {
        MhsaConfig {
            d_model: d,
            num_heads: h,
            use_2d_relative_positions: rel,
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut s = ParamStore::<f64>::new(0);
        assert!(matches!(Mhsa::new(&mut s, "a", cfg(10, 3, false), None), Err(Error::Config(_))));
    }

    #[test]
    fn zero_query_key_gives_mean_value() {
        let mut s = ParamStore::<f64>::new(1);
        let m = Mhsa::new(&mut s, "a", cfg(8, 2, false), None).unwrap();
        zero_all(&s, |n| n.starts_with("a.q.") || n.starts_with("a.k."));
        let x = random(&[2, 5, 8], 2);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 5, 8]);
        // expected: out(mean_t v(x_t)) for every token
        let mean = x.mean_axis(1).unwrap().reshape(&[2, 1, 8]).unwrap();
        let expect = m.out.forward(&m.v.forward(&mean).unwrap()).unwrap().to_vec();
        let y = y.to_vec();
        for b in 0..2 {
            for t in 0..5 {
                for c in 0..8 {
                    assert!((y[(b * 5 + t) * 8 + c] - expect[b * 8 + c]).abs() < 1e-12);
                }
            }
        }
    }

    fn permute_tokens(x: &Tensor<f64>, perm: &[usize]) -> Vec<f64> {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let v = x.to_vec();
        let mut out = vec![0.0; v.len()];
        for bi in 0..b {
            for (ti, &src) in perm.iter().enumerate() {
                out[(bi * t + ti) * d..(bi * t + ti + 1) * d].copy_from_slice(&v[(bi * t + src) * d..(bi * t + src + 1) * d]);
            }
        }
        out
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let mut s = ParamStore::<f64>::new(3);
        let m = Mhsa::new(&mut s, "a", cfg(8, 4, false), None).unwrap();
        let x = random(&[1, 4, 8], 4);
        let perm = [2, 0, 3, 1];
        let xp = Tensor::new(&[1, 4, 8], permute_tokens(&x, &perm)).unwrap();
        let y = m.forward(&x).unwrap();
        let yp = m.forward(&xp).unwrap();
        let expected = permute_tokens(&y, &perm);
        for (a, b) in yp.to_vec().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_positions_break_equivariance() {
        let mut s = ParamStore::<f64>::new(3);
        let m = Mhsa::new(&mut s, "a", cfg(8, 2, true), Some((2, 2))).unwrap();
        let x = random(&[1, 4, 8], 4);
        let perm = [1, 0, 3, 2];
        let xp = Tensor::new(&[1, 4, 8], permute_tokens(&x, &perm)).unwrap();
        let expected = permute_tokens(&m.forward(&x).unwrap(), &perm);
        let yp = m.forward(&xp).unwrap().to_vec();
        let max = yp.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max > 1e-6, "{max}");
    }

    #[test]
    fn relative_index_matches_definition() {
        // 2x3 grid: query (0,0), key (1,2) reads h offset 1+1, w offset 2+2
        let idx = RelPos::<f64>::index(1, 2, 3, true);
        assert_eq!(idx[5], 2);
        let idx = RelPos::<f64>::index(1, 2, 3, false);
        assert_eq!(idx[5], 4);
        // query (1,2) = token 5, key (0,0): h offset 0, w offset 0
        assert_eq!(idx[5 * 6], 5 * 5);
    }

    #[test]
    fn relative_logits_match_direct_sum() {
        let mut s = ParamStore::<f64>::new(9);
        let m = Mhsa::new(&mut s, "a", cfg(4, 1, true), Some((2, 3))).unwrap();
        let q = random(&[1, 6, 4], 10);
        let l = m.rel_logits(m.rel.as_ref().unwrap(), &q, 1, 6).unwrap().to_vec();
        let (qv, rh, rw) = (q.to_vec(), m.rel.as_ref().unwrap().rel_h.to_vec(), m.rel.as_ref().unwrap().rel_w.to_vec());
        for t in 0..6 {
            for u in 0..6 {
                let (ti, tj, ui, uj) = (t / 3, t % 3, u / 3, u % 3);
                let oh = ui + 1 - ti;
                let ow = uj + 2 - tj;
                let e: f64 = (0..4).map(|c| qv[t * 4 + c] * (rh[oh * 4 + c] + rw[ow * 4 + c])).sum();
                assert!((l[t * 6 + u] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_encoder_is_double_layer_norm() {
        let mut s = ParamStore::<f64>::new(5);
        let enc = TransformerEncoderLayer::new(&mut s, "enc", cfg(8, 2, false), 32).unwrap();
        zero_all(&s, |n| n.contains(".attn.") || n.contains(".ff."));
        let x = random(&[2, 3, 8], 6);
        let y = enc.forward(&x).unwrap().to_vec();
        let ln = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m) / (var + 1e-5).sqrt()).collect::<Vec<_>>()
        };
        for (tok, out) in x.to_vec().chunks(8).zip(y.chunks(8)) {
            let e = ln(&ln(tok));
            for (a, b) in out.iter().zip(&e) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_outputs_are_standardized() {
        let mut s = ParamStore::<f64>::new(7);
        let enc = TransformerEncoderLayer::new(&mut s, "enc", cfg(16, 4, false), 64).unwrap();
        let x = random(&[2, 3, 16], 8);
        let y = no_grad(|| enc.forward(&x)).unwrap();
        assert_eq!(y.shape(), x.shape());
        for tok in y.to_vec().chunks(16) {
            let m = tok.iter().sum::<f64>() / 16.0;
            let var = tok.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn single_token_spatial_attention() {
        let mut s = ParamStore::<f64>::new(2);
        let m = Mhsa::new(&mut s, "a", cfg(8, 2, true), Some((1, 1))).unwrap();
        let x = random(&[2, 8, 1, 1], 3);
        let y = m.forward_spatial(&x).unwrap();
        let tok = x.reshape(&[2, 1, 8]).unwrap();
        let e = m.out.forward(&m.v.forward(&tok).unwrap()).unwrap().to_vec();
        for (a, b) in y.to_vec().iter().zip(&e) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
