use std::ops::Range;

use super::kernels::dot;
use super::Tensor;
use crate::error::{Error, Result};

/// Structured attention pattern: for every query, the allowed keys as sorted,
/// disjoint index ranges.
pub trait KeyPattern {
    fn num_tokens(&self) -> usize;
    fn allowed_keys(&self, query: usize) -> &[Range<usize>];
}

/// Softmax attention of one query row over the keys yielded by `keys`.
///
/// Masked keys are excluded from the max subtraction and the normalizer, so
/// their weight is exactly zero. `probs` receives the weights at the allowed
/// positions only.
#[allow(clippy::too_many_arguments)]
fn attend_row<I>(
    query: usize,
    qi: &[f32],
    keys: I,
    k: &[f32],
    v: &[f32],
    dh: usize,
    probs: &mut [f32],
    out: &mut [f32],
) -> Result<()>
where
    I: Iterator<Item = usize> + Clone,
{
    let scale = 1.0 / (dh as f64).sqrt();
    let mut max = f32::NEG_INFINITY;
    let mut any = false;
    for j in keys.clone() {
        let s = (dot(qi, &k[j * dh..(j + 1) * dh]) * scale) as f32;
        probs[j] = s;
        max = max.max(s);
        any = true;
    }
    if !any {
        return Err(Error::EmptyMaskRow(query));
    }
    let mut sum = 0f64;
    for j in keys.clone() {
        let e = (probs[j] - max).exp();
        probs[j] = e;
        sum += e as f64;
    }
    let inv = 1.0 / sum;
    let mut acc = [0f64; 64];
    let acc = &mut acc[..dh.min(64)];
    let mut wide = if dh > 64 { vec![0f64; dh] } else { Vec::new() };
    let acc: &mut [f64] = if dh > 64 { &mut wide } else { acc };
    for j in keys {
        let a = (probs[j] as f64 * inv) as f32;
        probs[j] = a;
        for (s, &x) in acc.iter_mut().zip(&v[j * dh..(j + 1) * dh]) {
            *s += a as f64 * x as f64;
        }
    }
    for (o, s) in out.iter_mut().zip(acc.iter()) {
        *o = *s as f32;
    }
    Ok(())
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    let (n, d) = q.dims2()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape(
            "masked_attention",
            format!("q {:?}, k {:?}, v {:?} must agree", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok((n, d))
}

/// Single-head scaled dot-product attention under a dense binary mask.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (n, d) = check_qkv(q, k, v)?;
    if mask.shape() != [n, n] {
        return Err(Error::shape("masked_attention", format!("mask {:?} for {n} tokens", mask.shape())));
    }
    if let Some(bad) = mask.data().iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(Error::invalid(format!("mask entry {bad} is not binary")));
    }
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; n];
    for i in 0..n {
        let mrow = mask.row(i);
        let keys = (0..n).filter(|&j| mrow[j] != 0.0);
        attend_row(i, q.row(i), keys, k.data(), v.data(), d, &mut probs, &mut out[i * d..(i + 1) * d])?;
    }
    Tensor::new(vec![n, d], out)
}

/// Same computation as [`masked_attention`] driven by a block pattern that
/// never materializes the dense mask. Results agree bit-exactly.
pub fn masked_attention_blocks(q: &Tensor, k: &Tensor, v: &Tensor, pattern: &impl KeyPattern) -> Result<Tensor> {
    let (n, d) = check_qkv(q, k, v)?;
    if pattern.num_tokens() != n {
        return Err(Error::shape(
            "masked_attention_blocks",
            format!("pattern covers {} tokens, got {n}", pattern.num_tokens()),
        ));
    }
    let (out, _) = attention_forward(q.data(), k.data(), v.data(), n, d, pattern)?;
    Tensor::new(vec![n, d], out)
}

/// Block-pattern attention over contiguous `n×dh` buffers. Returns the output
/// and the dense `n×n` weight matrix (zero at masked positions).
pub(crate) fn attention_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    n: usize,
    dh: usize,
    pattern: &(impl KeyPattern + ?Sized),
) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut out = vec![0.0; n * dh];
    let mut probs = vec![0.0; n * n];
    for i in 0..n {
        let keys = pattern.allowed_keys(i).iter().flat_map(|r| r.clone());
        attend_row(
            i,
            &q[i * dh..(i + 1) * dh],
            keys,
            k,
            v,
            dh,
            &mut probs[i * n..(i + 1) * n],
            &mut out[i * dh..(i + 1) * dh],
        )?;
    }
    Ok((out, probs))
}

/// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    d_out: &[f32],
    n: usize,
    dh: usize,
    pattern: &(impl KeyPattern + ?Sized),
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0f32; n * dh];
    let mut dk = vec![0f64; n * dh];
    let mut dv = vec![0f64; n * dh];
    let mut da = vec![0f64; n];
    for i in 0..n {
        let ranges = pattern.allowed_keys(i);
        let doi = &d_out[i * dh..(i + 1) * dh];
        let prow = &probs[i * n..(i + 1) * n];
        let mut c = 0f64;
        for j in ranges.iter().flat_map(|r| r.clone()) {
            let g = dot(doi, &v[j * dh..(j + 1) * dh]);
            da[j] = g;
            c += prow[j] as f64 * g;
            let a = prow[j] as f64;
            for (s, &x) in dv[j * dh..(j + 1) * dh].iter_mut().zip(doi) {
                *s += a * x as f64;
            }
        }
        let qi = &q[i * dh..(i + 1) * dh];
        let mut dqi = vec![0f64; dh];
        for j in ranges.iter().flat_map(|r| r.clone()) {
            let ds = prow[j] as f64 * (da[j] - c) * scale;
            let kj = &k[j * dh..(j + 1) * dh];
            for t in 0..dh {
                dqi[t] += ds * kj[t] as f64;
                dk[j * dh + t] += ds * qi[t] as f64;
            }
        }
        for (o, s) in dq[i * dh..(i + 1) * dh].iter_mut().zip(dqi) {
            *o = s as f32;
        }
    }
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    (dq, to32(dk), to32(dv))
}
