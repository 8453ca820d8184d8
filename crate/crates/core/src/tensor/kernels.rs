use super::Tensor;
use crate::error::{Error, Result};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-6;

/// Inner product accumulated in `f64` over four fixed lanes.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] as f64 * y[0] as f64;
        acc[1] += x[1] as f64 * y[1] as f64;
        acc[2] += x[2] as f64 * y[2] as f64;
        acc[3] += x[3] as f64 * y[3] as f64;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += *x as f64 * *y as f64;
    }
    s
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if k == 0 {
        out.fill(0.0);
        return;
    }
    for (i, orow) in out.chunks_exact_mut(n).enumerate() {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, &b[j * k..(j + 1) * k]) as f32;
        }
    }
}

fn transpose_into(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = src[i * cols + j];
        }
    }
    t
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    let bt = transpose_into(b, k, n);
    gemm_nt(a, &bt, m, k, n, out);
}

/// `out[m×n] = a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize, out: &mut [f32]) {
    let at = transpose_into(a, k, m);
    let bt = transpose_into(b, k, n);
    gemm_nt(&at, &bt, m, k, n, out);
}

/// Per-row layer normalization without affine parameters. Returns the
/// normalized rows and each row's `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_rows(x: &[f32], d: usize) -> (Vec<f32>, Vec<f32>) {
    let n = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut inv = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        inv[i] = r as f32;
        for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = ((v as f64 - mean) * r) as f32;
        }
    }
    (out, inv)
}

pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let (out, _) = layer_norm_rows(x.data(), d);
    Tensor::new(vec![n, d], out)
}

/// Output of [`adaln_modulate`]: the modulated rows plus the residual gate,
/// which the caller applies to the sub-layer output.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulated {
    pub out: Tensor,
    pub gate: Tensor,
}

/// Layer norm followed by `norm(x) * (1 + scale) + shift`, broadcast over rows.
pub fn adaln_modulate(x: &Tensor, scale: &Tensor, shift: &Tensor, gate: &Tensor) -> Result<Modulated> {
    let (n, d) = x.dims2()?;
    for (name, t) in [("scale", scale), ("shift", shift), ("gate", gate)] {
        if t.len() != d {
            return Err(Error::shape("adaln_modulate", format!("{name} has {} values, rows have width {d}", t.len())));
        }
    }
    let (mut out, _) = layer_norm_rows(x.data(), d);
    for row in out.chunks_exact_mut(d) {
        for ((v, &s), &b) in row.iter_mut().zip(scale.data()).zip(shift.data()) {
            *v = *v * (1.0 + s) + b;
        }
    }
    Ok(Modulated { out: Tensor::new(vec![n, d], out)?, gate: gate.clone() })
}
