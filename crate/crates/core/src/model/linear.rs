use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Rng, Tensor};

/// Affine map `y = W·x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn random(out: usize, inp: usize, rng: &mut Rng) -> Self {
        Linear { weight: Tensor::randn(&[out, inp], 1.0 / (inp as f32).sqrt(), rng), bias: Tensor::zeros(&[out]) }
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Linear { weight: Tensor::zeros(&[out, inp]), bias: Tensor::zeros(&[out]) }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn apply_vec(&self, x: &[f32]) -> Vec<f32> {
        let inp = self.in_dim();
        (0..self.out_dim())
            .map(|o| (dot(&self.weight.data()[o * inp..(o + 1) * inp], x) + self.bias.data()[o] as f64) as f32)
            .collect()
    }

    /// Row-wise application to an `n × in` buffer.
    pub(crate) fn apply_rows(&self, x: &[f32], n: usize) -> Vec<f32> {
        let (out, inp) = (self.out_dim(), self.in_dim());
        let mut y = vec![0.0; n * out];
        gemm_nt(x, self.weight.data(), n, inp, out, &mut y);
        for row in y.chunks_exact_mut(out) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        y
    }
}

/// Low-rank update `(alpha / r) · B · A` added to a frozen projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `r × in`
    pub a: Tensor,
    /// `out × r`
    pub b: Tensor,
    pub alpha: f32,
}

impl LoraAdapter {
    /// `A` random, `B` zero: the adapter starts as a zero delta.
    pub fn init(out: usize, inp: usize, rank: usize, alpha: f32, rng: &mut Rng) -> Self {
        LoraAdapter {
            a: Tensor::randn(&[rank, inp], 1.0 / (inp as f32).sqrt(), rng),
            b: Tensor::zeros(&[out, rank]),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank() as f32
    }
}

/// Intermediate `U = X·Aᵀ` kept for the backward pass.
pub(crate) struct LoraCache {
    pub u: Vec<f32>,
}

/// `Y = X·Wᵀ + b + s·(X·Aᵀ)·Bᵀ` over `n` rows.
pub(crate) fn lora_rows(
    base: &Linear,
    adapter: Option<&LoraAdapter>,
    x: &[f32],
    n: usize,
) -> (Vec<f32>, Option<LoraCache>) {
    let mut y = base.apply_rows(x, n);
    let Some(ad) = adapter else { return (y, None) };
    let (out, inp, r) = (base.out_dim(), base.in_dim(), ad.rank());
    let mut u = vec![0.0; n * r];
    gemm_nt(x, ad.a.data(), n, inp, r, &mut u);
    let mut delta = vec![0.0; n * out];
    gemm_nt(&u, ad.b.data(), n, r, out, &mut delta);
    let s = ad.scale();
    for (v, d) in y.iter_mut().zip(&delta) {
        *v += s * d;
    }
    (y, Some(LoraCache { u }))
}

#[derive(Clone, Debug)]
pub(crate) struct LoraGrad {
    pub a: Tensor,
    pub b: Tensor,
}

/// Backward of [`lora_rows`]: returns `dX` and the adapter gradients. The
/// frozen base receives none.
pub(crate) fn lora_rows_backward(
    base: &Linear,
    adapter: Option<&LoraAdapter>,
    cache: Option<&LoraCache>,
    x: &[f32],
    dy: &[f32],
    n: usize,
) -> (Vec<f32>, Option<LoraGrad>) {
    let (out, inp) = (base.out_dim(), base.in_dim());
    let mut dx = vec![0.0; n * inp];
    gemm_nn(dy, base.weight.data(), n, out, inp, &mut dx);
    let (Some(ad), Some(cache)) = (adapter, cache) else { return (dx, None) };
    let r = ad.rank();
    let s = ad.scale();
    // dU = s·dY·B
    let mut du = vec![0.0; n * r];
    gemm_nn(dy, ad.b.data(), n, out, r, &mut du);
    du.iter_mut().for_each(|v| *v *= s);
    // dB = s·dYᵀ·U
    let mut db = vec![0.0; out * r];
    gemm_tn(dy, &cache.u, n, out, r, &mut db);
    db.iter_mut().for_each(|v| *v *= s);
    // dA = dUᵀ·X
    let mut da = vec![0.0; r * inp];
    gemm_tn(&du, x, n, r, inp, &mut da);
    let mut dx_lora = vec![0.0; n * inp];
    gemm_nn(&du, ad.a.data(), n, r, inp, &mut dx_lora);
    for (v, d) in dx.iter_mut().zip(&dx_lora) {
        *v += d;
    }
    let grad =
        LoraGrad { a: Tensor::new(vec![r, inp], da).expect("shape"), b: Tensor::new(vec![out, r], db).expect("shape") };
    (dx, Some(grad))
}

/// `y = W·x + (alpha/r)·B·(A·x)` for a single vector.
pub fn lora_apply(base: &Tensor, adapter: &LoraAdapter, x: &[f32]) -> Result<Vec<f32>> {
    let (out, inp) = base.dims2()?;
    let (r, a_in) = adapter.a.dims2()?;
    let (b_out, b_r) = adapter.b.dims2()?;
    if a_in != inp || b_out != out || x.len() != inp {
        return Err(Error::shape("lora_apply", format!("W {out}x{inp}, A {r}x{a_in}, B {b_out}x{b_r}, x {}", x.len())));
    }
    if b_r != r {
        return Err(Error::shape("lora_apply", format!("rank mismatch: A has rank {r}, B has rank {b_r}")));
    }
    let ax: Vec<f32> = (0..r).map(|i| dot(adapter.a.row(i), x) as f32).collect();
    let s = adapter.scale() as f64;
    Ok((0..out).map(|o| (dot(base.row(o), x) + s * dot(adapter.b.row(o), &ax)) as f32).collect())
}

/// Projections that may carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Qkv,
    AttnOut,
    MlpIn,
    MlpOut,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Qkv, Projection::AttnOut, Projection::MlpIn, Projection::MlpOut];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Qkv => "qkv",
            Projection::AttnOut => "attn_out",
            Projection::MlpIn => "mlp_in",
            Projection::MlpOut => "mlp_out",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_b_leaves_base_output() {
        let mut rng = Rng::new(3);
        let w = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let ad = LoraAdapter::init(5, 4, 2, 4.0, &mut rng);
        let x = [0.3, -1.0, 2.0, 0.5];
        let y = lora_apply(&w, &ad, &x).unwrap();
        let base: Vec<f32> = (0..5).map(|o| dot(w.row(o), &x) as f32).collect();
        assert_eq!(y, base);
    }

    #[test]
    fn rank_one_outer_product() {
        let (i, j) = (2, 1);
        let w = Tensor::zeros(&[3, 4]);
        let ad = LoraAdapter {
            a: Tensor::from_fn(&[1, 4], |k| (k == i) as u8 as f32),
            b: Tensor::from_fn(&[3, 1], |k| (k == j) as u8 as f32),
            alpha: 1.0,
        };
        let x = [1.5, -2.0, 7.0, 0.25];
        assert_eq!(lora_apply(&w, &ad, &x).unwrap(), vec![0.0, 7.0, 0.0]);
    }

    #[test]
    fn rank_mismatch_is_an_error() {
        let w = Tensor::zeros(&[3, 4]);
        let ad = LoraAdapter { a: Tensor::zeros(&[2, 4]), b: Tensor::zeros(&[3, 3]), alpha: 1.0 };
        assert!(matches!(lora_apply(&w, &ad, &[0.0; 4]), Err(Error::Shape { .. })));
    }

    #[test]
    fn matches_dense_materialization() {
        let mut rng = Rng::new(11);
        for (out, inp, r) in [(7, 5, 3), (4, 9, 1), (6, 6, 6)] {
            let w = Tensor::randn(&[out, inp], 1.0, &mut rng);
            let ad = LoraAdapter {
                a: Tensor::randn(&[r, inp], 1.0, &mut rng),
                b: Tensor::randn(&[out, r], 1.0, &mut rng),
                alpha: 2.5,
            };
            let x: Vec<f32> = (0..inp).map(|_| rng.normal()).collect();
            // W + (alpha/r)·B·A, then one matrix-vector product.
            let s = 2.5 / r as f64;
            let mut dense = vec![0f64; out * inp];
            for o in 0..out {
                for c in 0..inp {
                    let mut ba = 0f64;
                    for k in 0..r {
                        ba += ad.b.get2(o, k) as f64 * ad.a.get2(k, c) as f64;
                    }
                    dense[o * inp + c] = w.get2(o, c) as f64 + s * ba;
                }
            }
            let y = lora_apply(&w, &ad, &x).unwrap();
            for o in 0..out {
                let expect: f64 = (0..inp).map(|c| dense[o * inp + c] * x[c] as f64).sum();
                assert!((y[o] as f64 - expect).abs() < 1e-6 * expect.abs().max(1.0), "{} vs {expect}", y[o]);
            }
        }
    }
}
