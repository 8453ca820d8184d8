use std::sync::Arc;

use super::linear::{lora_rows, lora_rows_backward, LoraCache, LoraGrad};
use super::{BlockWeights, Gradients, ModelWeights, Projection};
use crate::caci::{modulation_set, BlockModulation, CaciPlan, ModulationEntry, ModulationSet, PooledPrompts};
use crate::error::{Error, Result};
use crate::ham::{build_ham, AttentionMask};
use crate::layout::{ModelInput, SegmentKind};
use crate::tensor::{attention_backward, attention_forward, gemm_nn, layer_norm_rows, KeyPattern, Tensor};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(u: f32) -> f32 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f32) -> f32 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// `norm * (1 + scale[seg]) + shift[seg]` row by row.
fn modulate(norm: &[f32], d: usize, token_seg: &[usize], scale: &[&[f32]; 5], shift: &[&[f32]; 5]) -> Vec<f32> {
    let mut out = vec![0.0; norm.len()];
    for (i, &s) in token_seg.iter().enumerate() {
        let (sc, sh) = (scale[s], shift[s]);
        for t in 0..d {
            out[i * d + t] = norm[i * d + t] * (1.0 + sc[t]) + sh[t];
        }
    }
    out
}

/// Backward of layer norm: `dx = inv * (dn - mean(dn) - n * mean(dn * n))`.
fn layer_norm_backward(norm: &[f32], inv: &[f32], dnorm: &[f32], d: usize, dx: &mut [f32]) {
    for (i, &r) in inv.iter().enumerate() {
        let n = &norm[i * d..(i + 1) * d];
        let g = &dnorm[i * d..(i + 1) * d];
        let mean_g = g.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let mean_gn = g.iter().zip(n).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / d as f64;
        for t in 0..d {
            dx[i * d + t] += (r as f64 * (g[t] as f64 - mean_g - n[t] as f64 * mean_gn)) as f32;
        }
    }
}

/// Per-segment slices of one block's modulation, indexed by segment kind.
struct BlockMods<'a> {
    shift_attn: [&'a [f32]; 5],
    scale_attn: [&'a [f32]; 5],
    gate_attn: [&'a [f32]; 5],
    shift_mlp: [&'a [f32]; 5],
    scale_mlp: [&'a [f32]; 5],
    gate_mlp: [&'a [f32]; 5],
}

impl<'a> BlockMods<'a> {
    fn gather(mods: &'a ModulationSet, f: impl Fn(&'a ModulationEntry) -> &'a BlockModulation) -> Self {
        let empty: &[f32] = &[];
        let pick = |g: &dyn Fn(&'a BlockModulation) -> &'a [f32]| -> [&'a [f32]; 5] {
            std::array::from_fn(|k| mods.0[k].as_ref().map_or(empty, |e| g(f(e))))
        };
        BlockMods {
            shift_attn: pick(&|b| &b.shift_attn),
            scale_attn: pick(&|b| &b.scale_attn),
            gate_attn: pick(&|b| &b.gate_attn),
            shift_mlp: pick(&|b| &b.shift_mlp),
            scale_mlp: pick(&|b| &b.scale_mlp),
            gate_mlp: pick(&|b| &b.gate_mlp),
        }
    }
}

/// Activations of one block kept for the backward pass.
pub struct BlockCache {
    ln1: Vec<f32>,
    inv1: Vec<f32>,
    h1: Vec<f32>,
    qkv_cache: Option<LoraCache>,
    heads: Vec<HeadCache>,
    attn: Vec<f32>,
    attn_cache: Option<LoraCache>,
    attn_proj: Vec<f32>,
    ln2: Vec<f32>,
    inv2: Vec<f32>,
    h2: Vec<f32>,
    pre_act: Vec<f32>,
    mlp_in_cache: Option<LoraCache>,
    act: Vec<f32>,
    mlp_out_cache: Option<LoraCache>,
    mlp: Vec<f32>,
}

struct HeadCache {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
}

fn block_forward_cached(
    x: &[f32],
    d: usize,
    heads: usize,
    token_seg: &[usize],
    mods: &BlockMods,
    pattern: &dyn KeyPattern,
    w: &BlockWeights,
) -> Result<(Vec<f32>, BlockCache)> {
    let n = token_seg.len();
    let dh = d / heads;
    let (ln1, inv1) = layer_norm_rows(x, d);
    let h1 = modulate(&ln1, d, token_seg, &mods.scale_attn, &mods.shift_attn);
    let (qkv, qkv_cache) = lora_rows(&w.qkv, w.adapter(Projection::Qkv), &h1, n);
    let mut attn = vec![0.0; n * d];
    let mut head_caches = Vec::with_capacity(heads);
    for h in 0..heads {
        let take = |base: usize| -> Vec<f32> {
            let mut out = Vec::with_capacity(n * dh);
            for i in 0..n {
                let start = i * 3 * d + base + h * dh;
                out.extend_from_slice(&qkv[start..start + dh]);
            }
            out
        };
        let (q, k, v) = (take(0), take(d), take(2 * d));
        let (o, probs) = attention_forward(&q, &k, &v, n, dh, pattern)?;
        for i in 0..n {
            attn[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
        }
        head_caches.push(HeadCache { q, k, v, probs });
    }
    let (attn_proj, attn_cache) = lora_rows(&w.attn_out, w.adapter(Projection::AttnOut), &attn, n);
    let mut x1 = x.to_vec();
    for (i, &s) in token_seg.iter().enumerate() {
        let g = mods.gate_attn[s];
        for t in 0..d {
            x1[i * d + t] += g[t] * attn_proj[i * d + t];
        }
    }
    let (ln2, inv2) = layer_norm_rows(&x1, d);
    let h2 = modulate(&ln2, d, token_seg, &mods.scale_mlp, &mods.shift_mlp);
    let (pre_act, mlp_in_cache) = lora_rows(&w.mlp_in, w.adapter(Projection::MlpIn), &h2, n);
    let act: Vec<f32> = pre_act.iter().map(|&u| gelu(u)).collect();
    let (mlp, mlp_out_cache) = lora_rows(&w.mlp_out, w.adapter(Projection::MlpOut), &act, n);
    let mut x2 = x1;
    for (i, &s) in token_seg.iter().enumerate() {
        let g = mods.gate_mlp[s];
        for t in 0..d {
            x2[i * d + t] += g[t] * mlp[i * d + t];
        }
    }
    let cache = BlockCache {
        ln1,
        inv1,
        h1,
        qkv_cache,
        heads: head_caches,
        attn,
        attn_cache,
        attn_proj,
        ln2,
        inv2,
        h2,
        pre_act,
        mlp_in_cache,
        act,
        mlp_out_cache,
        mlp,
    };
    Ok((x2, cache))
}

/// Gradient of one block: returns `dx` and accumulates the per-segment
/// modulation gradient (`6d` per segment) and adapter gradients.
#[allow(clippy::too_many_arguments)]
fn block_backward(
    cache: &BlockCache,
    dx_out: &[f32],
    d: usize,
    token_seg: &[usize],
    mods: &BlockMods,
    pattern: &dyn KeyPattern,
    w: &BlockWeights,
    dmod: &mut [Vec<f64>; 5],
    adapter_grads: &mut [Option<LoraGrad>; 4],
) -> Vec<f32> {
    let n = token_seg.len();
    let heads = cache.heads.len();
    let dh = d / heads;
    // MLP residual.
    let mut dm = vec![0.0; n * d];
    for (i, &s) in token_seg.iter().enumerate() {
        let g = mods.gate_mlp[s];
        let acc = &mut dmod[s];
        for t in 0..d {
            let up = dx_out[i * d + t];
            acc[5 * d + t] += up as f64 * cache.mlp[i * d + t] as f64;
            dm[i * d + t] = up * g[t];
        }
    }
    let (mut dact, g_mo) =
        lora_rows_backward(&w.mlp_out, w.adapter(Projection::MlpOut), cache.mlp_out_cache.as_ref(), &cache.act, &dm, n);
    adapter_grads[Projection::MlpOut as usize] = g_mo;
    for (g, &u) in dact.iter_mut().zip(&cache.pre_act) {
        *g *= gelu_grad(u);
    }
    let (dh2, g_mi) =
        lora_rows_backward(&w.mlp_in, w.adapter(Projection::MlpIn), cache.mlp_in_cache.as_ref(), &cache.h2, &dact, n);
    adapter_grads[Projection::MlpIn as usize] = g_mi;
    let mut dln2 = vec![0.0; n * d];
    for (i, &s) in token_seg.iter().enumerate() {
        let sc = mods.scale_mlp[s];
        let acc = &mut dmod[s];
        for t in 0..d {
            let g = dh2[i * d + t];
            acc[3 * d + t] += g as f64;
            acc[4 * d + t] += g as f64 * cache.ln2[i * d + t] as f64;
            dln2[i * d + t] = g * (1.0 + sc[t]);
        }
    }
    let mut dx1 = dx_out.to_vec();
    layer_norm_backward(&cache.ln2, &cache.inv2, &dln2, d, &mut dx1);

    // Attention residual.
    let mut dao = vec![0.0; n * d];
    for (i, &s) in token_seg.iter().enumerate() {
        let g = mods.gate_attn[s];
        let acc = &mut dmod[s];
        for t in 0..d {
            let up = dx1[i * d + t];
            acc[2 * d + t] += up as f64 * cache.attn_proj[i * d + t] as f64;
            dao[i * d + t] = up * g[t];
        }
    }
    let (dattn, g_ao) = lora_rows_backward(
        &w.attn_out,
        w.adapter(Projection::AttnOut),
        cache.attn_cache.as_ref(),
        &cache.attn,
        &dao,
        n,
    );
    adapter_grads[Projection::AttnOut as usize] = g_ao;
    let mut dqkv = vec![0.0; n * 3 * d];
    for (h, hc) in cache.heads.iter().enumerate() {
        let mut do_h = Vec::with_capacity(n * dh);
        for i in 0..n {
            do_h.extend_from_slice(&dattn[i * d + h * dh..i * d + (h + 1) * dh]);
        }
        let (dq, dk, dv) = attention_backward(&hc.q, &hc.k, &hc.v, &hc.probs, &do_h, n, dh, pattern);
        for i in 0..n {
            for (base, src) in [(0, &dq), (d, &dk), (2 * d, &dv)] {
                let start = i * 3 * d + base + h * dh;
                dqkv[start..start + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
            }
        }
    }
    let (dh1, g_qkv) =
        lora_rows_backward(&w.qkv, w.adapter(Projection::Qkv), cache.qkv_cache.as_ref(), &cache.h1, &dqkv, n);
    adapter_grads[Projection::Qkv as usize] = g_qkv;
    let mut dln1 = vec![0.0; n * d];
    for (i, &s) in token_seg.iter().enumerate() {
        let sc = mods.scale_attn[s];
        let acc = &mut dmod[s];
        for t in 0..d {
            let g = dh1[i * d + t];
            acc[t] += g as f64;
            acc[d + t] += g as f64 * cache.ln1[i * d + t] as f64;
            dln1[i * d + t] = g * (1.0 + sc[t]);
        }
    }
    let mut dx = dx1;
    layer_norm_backward(&cache.ln1, &cache.inv1, &dln1, d, &mut dx);
    dx
}

fn token_segments(mask: &AttentionMask) -> Vec<usize> {
    mask.layout.token_kinds().into_iter().map(SegmentKind::index).collect()
}

/// One transformer block over `x` (`n × d`) with the given mask and
/// per-segment modulation.
pub fn block_forward(
    x: &Tensor,
    mask: &AttentionMask,
    mods: &ModulationSet,
    block: usize,
    weights: &BlockWeights,
    heads: usize,
) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if n != mask.layout.total() {
        return Err(Error::shape("block_forward", format!("{n} tokens for a layout of {}", mask.layout.total())));
    }
    for kind in mask.layout.kinds() {
        let entry = mods.get(kind)?;
        if entry.blocks.len() <= block {
            return Err(Error::Missing(format!("block {block} modulation for {kind}")));
        }
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("block_forward", format!("width {d} not divisible by {heads} heads")));
    }
    let bm = BlockMods::gather(mods, |e| &e.blocks[block]);
    let (out, _) = block_forward_cached(x.data(), d, heads, &token_segments(mask), &bm, mask, weights)?;
    Tensor::new(vec![n, d], out)
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache {
    pub mask: Arc<AttentionMask>,
    pub mods: ModulationSet,
    token_seg: Vec<usize>,
    blocks: Vec<BlockCache>,
    lnf: Vec<f32>,
    invf: Vec<f32>,
}

fn check_input(input: &ModelInput, w: &ModelWeights) -> Result<()> {
    let layout = w.layout()?;
    if input.layout != layout {
        return Err(Error::shape(
            "model_forward",
            format!("input layout {:?} differs from model layout {:?}", input.layout.lengths(), layout.lengths()),
        ));
    }
    let (_, d) = input.tokens.dims2()?;
    if d != w.config.hidden {
        return Err(Error::shape("model_forward", format!("token width {d}, model width {}", w.config.hidden)));
    }
    Ok(())
}

pub(crate) fn forward_cached(input: &ModelInput, plan: &CaciPlan, w: &ModelWeights) -> Result<(Tensor, ForwardCache)> {
    check_input(input, w)?;
    let d = w.config.hidden;
    let n = input.layout.total();
    let mask = build_ham(&input.layout);
    let pooled = PooledPrompts::from_tokens(&input.tokens, &input.layout);
    let mods = modulation_set(plan, &input.layout, input.diffusion_t, &pooled, &w.adaln)?;
    let token_seg = token_segments(&mask);

    let mut x = input.tokens.data().to_vec();
    for (seg, pos) in input.layout.segments().iter().zip(&w.positions) {
        for (v, p) in x[seg.offset * d..(seg.offset + seg.len) * d].iter_mut().zip(pos.data()) {
            *v += p;
        }
    }
    let mut caches = Vec::with_capacity(w.blocks.len());
    for (b, bw) in w.blocks.iter().enumerate() {
        let bm = BlockMods::gather(&mods, |e| &e.blocks[b]);
        let (next, cache) = block_forward_cached(&x, d, w.config.heads, &token_seg, &bm, mask.as_ref(), bw)?;
        caches.push(cache);
        x = next;
    }
    let (lnf, invf) = layer_norm_rows(&x, d);
    let empty: &[f32] = &[];
    let fscale: [&[f32]; 5] = std::array::from_fn(|k| mods.0[k].as_ref().map_or(empty, |e| e.final_scale.as_slice()));
    let fshift: [&[f32]; 5] = std::array::from_fn(|k| mods.0[k].as_ref().map_or(empty, |e| e.final_shift.as_slice()));
    let hf = modulate(&lnf, d, &token_seg, &fscale, &fshift);
    let out = w.out_proj.apply_rows(&hf, n);
    let out = Tensor::new(vec![n, w.config.latent_width()], out)?;
    if !out.all_finite() {
        return Err(Error::NonFinite("model output".into()));
    }
    Ok((out, ForwardCache { mask, mods, token_seg, blocks: caches, lnf, invf }))
}

/// Velocity prediction for every token (`n × latent_width`). Only the
/// target-segment rows are meaningful.
pub fn model_forward(input: &ModelInput, plan: &CaciPlan, weights: &ModelWeights) -> Result<Tensor> {
    forward_cached(input, plan, weights).map(|(out, _)| out)
}

fn outer_accumulate(dmod: &[Vec<f64>; 5], mods: &ModulationSet, rows: usize, d: usize) -> (Tensor, Tensor) {
    let mut dw = vec![0f64; rows * d];
    let mut db = vec![0f64; rows];
    for (k, g) in dmod.iter().enumerate() {
        let Some(entry) = mods.0[k].as_ref() else { continue };
        if g.is_empty() {
            continue;
        }
        for r in 0..rows {
            db[r] += g[r];
            for (c, &f) in entry.features.iter().enumerate() {
                dw[r * d + c] += g[r] * f as f64;
            }
        }
    }
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    (Tensor::new(vec![rows, d], to32(dw)).expect("shape"), Tensor::new(vec![rows], to32(db)).expect("shape"))
}

/// Gradients of the trainable parameters given `d_out = ∂loss/∂output`.
pub(crate) fn model_backward(cache: &ForwardCache, d_out: &[f32], w: &ModelWeights) -> Gradients {
    let d = w.config.hidden;
    let n = cache.token_seg.len();
    let p = w.config.latent_width();
    debug_assert_eq!(d_out.len(), n * p);

    let mut dhf = vec![0.0; n * d];
    gemm_nn(d_out, w.out_proj.weight.data(), n, p, d, &mut dhf);
    let mut dfinal: [Vec<f64>; 5] = Default::default();
    for k in cache.mask.layout.kinds() {
        dfinal[k.index()] = vec![0.0; 2 * d];
    }
    let mut dlnf = vec![0.0; n * d];
    for (i, &s) in cache.token_seg.iter().enumerate() {
        let sc = &cache.mods.0[s].as_ref().expect("segment modulation").final_scale;
        let acc = &mut dfinal[s];
        for t in 0..d {
            let g = dhf[i * d + t];
            acc[t] += g as f64;
            acc[d + t] += g as f64 * cache.lnf[i * d + t] as f64;
            dlnf[i * d + t] = g * (1.0 + sc[t]);
        }
    }
    let mut dx = vec![0.0; n * d];
    layer_norm_backward(&cache.lnf, &cache.invf, &dlnf, d, &mut dx);

    let mut block_adapter_grads: Vec<[Option<LoraGrad>; 4]> = (0..w.blocks.len()).map(|_| Default::default()).collect();
    let mut block_mod_grads: Vec<(Tensor, Tensor)> = Vec::with_capacity(w.blocks.len());
    for (b, bw) in w.blocks.iter().enumerate().rev() {
        let bm = BlockMods::gather(&cache.mods, |e| &e.blocks[b]);
        let mut dmod: [Vec<f64>; 5] = Default::default();
        for k in cache.mask.layout.kinds() {
            dmod[k.index()] = vec![0.0; 6 * d];
        }
        dx = block_backward(
            &cache.blocks[b],
            &dx,
            d,
            &cache.token_seg,
            &bm,
            cache.mask.as_ref(),
            bw,
            &mut dmod,
            &mut block_adapter_grads[b],
        );
        block_mod_grads.push(outer_accumulate(&dmod, &cache.mods, 6 * d, d));
    }
    block_mod_grads.reverse();

    let mut grads = Vec::new();
    for adapters in block_adapter_grads {
        for g in adapters.into_iter().flatten() {
            grads.push(g.a);
            grads.push(g.b);
        }
    }
    if w.config.train_adaln {
        for (gw, gb) in block_mod_grads {
            grads.push(gw);
            grads.push(gb);
        }
        let (gw, gb) = outer_accumulate(&dfinal, &cache.mods, 2 * d, d);
        grads.push(gw);
        grads.push(gb);
    }
    Gradients(grads)
}
