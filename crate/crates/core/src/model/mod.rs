//! LoRA-adapted single-stream transformer over the concatenated sequence.
//!
//! The backbone (patch embedding, prompt table, positions, block projections,
//! conditioning embedder, output projection) is frozen after initialization.
//! Training touches only the low-rank adapters and, when enabled, the
//! zero-initialized AdaLN modulation projections.

mod block;
mod checkpoint;
mod linear;
mod patch;

pub use block::{block_forward, model_forward, BlockCache, ForwardCache};
pub(crate) use block::{forward_cached, model_backward};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use linear::{lora_apply, Linear, LoraAdapter, Projection};
pub use patch::{decode_latent, encode_image, patchify, unpatchify};

use serde::{Deserialize, Serialize};

use crate::caci::AdaLnWeights;
use crate::error::{Error, Result};
use crate::layout::{build_layout, SegmentKind, SegmentLayout};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    /// Token count of the relational prompt segment.
    pub rel_len: usize,
    /// Token count of each individual prompt segment.
    pub ind_len: usize,
    pub vocab_size: usize,
    /// `false` selects the four-segment layout without a relational prompt.
    pub use_rel: bool,
    pub adapted: Vec<Projection>,
    pub train_adaln: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            hidden: 128,
            heads: 4,
            blocks: 6,
            mlp_ratio: 4,
            lora_rank: 8,
            lora_alpha: 16.0,
            rel_len: crate::world::REL_LEN,
            ind_len: crate::world::IND_LEN,
            vocab_size: crate::world::vocab_size(),
            use_rel: true,
            adapted: Projection::ALL.to_vec(),
            train_adaln: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by tests and quick experiments: 16×16
    /// images, 2×2 patches, width 16, two blocks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 2,
            hidden: 16,
            heads: 2,
            blocks: 2,
            lora_rank: 4,
            lora_alpha: 8.0,
            ..ModelConfig::default()
        }
    }

    /// [`ModelConfig::tiny`] with rank-16 adapters, the setting used for
    /// desk-scale training runs.
    pub fn desk() -> Self {
        ModelConfig { lora_rank: 16, lora_alpha: 32.0, ..ModelConfig::tiny() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!("image size {} not divisible by patch size {}", self.image_size, self.patch_size));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden width {} not divisible by {} heads", self.hidden, self.heads));
        }
        if !self.hidden.is_multiple_of(2) {
            return fail(format!("hidden width {} must be even", self.hidden));
        }
        if self.lora_rank == 0 {
            return fail("LoRA rank must be at least 1".into());
        }
        if self.blocks == 0 || self.mlp_ratio == 0 || self.ind_len == 0 || (self.use_rel && self.rel_len == 0) {
            return fail("blocks, mlp ratio and prompt lengths must be positive".into());
        }
        Ok(())
    }

    pub fn latent_width(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn tokens_per_image(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn layout(&self) -> Result<SegmentLayout> {
        let v = self.tokens_per_image();
        if self.use_rel {
            build_layout(self.rel_len, self.ind_len, self.ind_len, v, v)
        } else {
            SegmentLayout::without_rel(self.ind_len, self.ind_len, v, v)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub qkv: Linear,
    pub attn_out: Linear,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    /// Adapters indexed like [`Projection::ALL`].
    pub adapters: [Option<LoraAdapter>; 4],
}

impl BlockWeights {
    fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.hidden;
        let hid = d * cfg.mlp_ratio;
        let qkv = Linear::random(3 * d, d, rng);
        let attn_out = Linear::random(d, d, rng);
        let mlp_in = Linear::random(hid, d, rng);
        let mlp_out = Linear::random(d, hid, rng);
        let mut adapters: [Option<LoraAdapter>; 4] = Default::default();
        for (slot, proj) in adapters.iter_mut().zip(Projection::ALL) {
            if cfg.adapted.contains(&proj) {
                let base = match proj {
                    Projection::Qkv => &qkv,
                    Projection::AttnOut => &attn_out,
                    Projection::MlpIn => &mlp_in,
                    Projection::MlpOut => &mlp_out,
                };
                *slot = Some(LoraAdapter::init(base.out_dim(), base.in_dim(), cfg.lora_rank, cfg.lora_alpha, rng));
            }
        }
        BlockWeights { qkv, attn_out, mlp_in, mlp_out, adapters }
    }

    pub fn base(&self, p: Projection) -> &Linear {
        match p {
            Projection::Qkv => &self.qkv,
            Projection::AttnOut => &self.attn_out,
            Projection::MlpIn => &self.mlp_in,
            Projection::MlpOut => &self.mlp_out,
        }
    }

    pub fn adapter(&self, p: Projection) -> Option<&LoraAdapter> {
        self.adapters[p as usize].as_ref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `d × latent_width`
    pub patch_embed: Linear,
    /// `vocab × d`
    pub prompt_table: Tensor,
    /// One `len × d` table per segment, in layout order.
    pub positions: Vec<Tensor>,
    pub adaln: AdaLnWeights,
    pub blocks: Vec<BlockWeights>,
    /// `latent_width × d`
    pub out_proj: Linear,
}

impl ModelWeights {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let d = config.hidden;
        let layout = config.layout()?;
        let mut rng = root.substream("model.embed");
        let patch_embed = Linear::random(d, config.latent_width(), &mut rng);
        let prompt_table = Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng);
        let mut rng = root.substream("model.positions");
        let grid = config.image_size / config.patch_size;
        let positions = layout
            .segments()
            .iter()
            .map(|s| {
                if s.kind.is_text() {
                    Tensor::randn(&[s.len, d], 0.5, &mut rng)
                } else {
                    grid_positions(grid, d, &mut rng)
                }
            })
            .collect();
        let adaln = AdaLnWeights::init(d, config.blocks, &mut root.substream("model.adaln"));
        let blocks = (0..config.blocks)
            .map(|i| BlockWeights::init(config, &mut root.substream_indexed("model.block", i as u64)))
            .collect();
        let out_proj = Linear::random(config.latent_width(), d, &mut root.substream("model.out"));
        Ok(ModelWeights { config: config.clone(), patch_embed, prompt_table, positions, adaln, blocks, out_proj })
    }

    pub fn layout(&self) -> Result<SegmentLayout> {
        self.config.layout()
    }

    /// Prompt codes to `len × d` token rows.
    pub fn embed_prompt(&self, codes: &[u32]) -> Result<Tensor> {
        let d = self.config.hidden;
        let mut data = Vec::with_capacity(codes.len() * d);
        for &c in codes {
            if c as usize >= self.config.vocab_size {
                return Err(Error::UnknownCode(format!(
                    "prompt code {c} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            data.extend_from_slice(self.prompt_table.row(c as usize));
        }
        Tensor::new(vec![codes.len(), d], data)
    }

    /// Latent patches (`tokens × latent_width`) to `tokens × d` rows.
    pub fn embed_latent(&self, latent: &Tensor) -> Result<Tensor> {
        let (n, w) = latent.dims2()?;
        if w != self.config.latent_width() {
            return Err(Error::shape(
                "embed_latent",
                format!("latent width {w}, expected {}", self.config.latent_width()),
            ));
        }
        Tensor::new(vec![n, self.config.hidden], self.patch_embed.apply_rows(latent.data(), n))
    }

    pub fn position_table(&self, kind: SegmentKind) -> Option<&Tensor> {
        let idx = self.layout().ok()?.kinds().position(|k| k == kind)?;
        self.positions.get(idx)
    }

    /// Every tensor with a stable name, frozen ones included.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.weight".into(), &self.patch_embed.weight),
            ("patch_embed.bias".into(), &self.patch_embed.bias),
            ("prompt_table".into(), &self.prompt_table),
        ];
        if let Ok(layout) = self.layout() {
            for (kind, t) in layout.kinds().zip(&self.positions) {
                out.push((format!("positions.{kind}"), t));
            }
        }
        for (name, l) in [("adaln.embed_in", &self.adaln.embed_in), ("adaln.embed_out", &self.adaln.embed_out)] {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for p in Projection::ALL {
                out.push((format!("blocks.{i}.{}.weight", p.name()), &b.base(p).weight));
                out.push((format!("blocks.{i}.{}.bias", p.name()), &b.base(p).bias));
            }
        }
        out.push(("out_proj.weight".into(), &self.out_proj.weight));
        out.push(("out_proj.bias".into(), &self.out_proj.bias));
        if !self.config.train_adaln {
            out.extend(self.adaln_modulation());
        }
        out.extend(self.trainable());
        out
    }

    /// Trainable tensors in canonical order: per-block adapters, then the
    /// per-block modulation projections, then the output-layer modulation.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for p in Projection::ALL {
                if let Some(ad) = b.adapter(p) {
                    out.push((format!("blocks.{i}.{}.lora_a", p.name()), &ad.a));
                    out.push((format!("blocks.{i}.{}.lora_b", p.name()), &ad.b));
                }
            }
        }
        if self.config.train_adaln {
            out.extend(self.adaln_modulation());
        }
        out
    }

    fn adaln_modulation(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.adaln.blocks.iter().enumerate() {
            out.push((format!("adaln.blocks.{i}.weight"), &l.weight));
            out.push((format!("adaln.blocks.{i}.bias"), &l.bias));
        }
        out.push(("adaln.final.weight".into(), &self.adaln.final_layer.weight));
        out.push(("adaln.final.bias".into(), &self.adaln.final_layer.bias));
        out
    }

    /// Mutable view of [`ModelWeights::trainable`], same order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in self.blocks.iter_mut() {
            for ad in b.adapters.iter_mut().flatten() {
                out.push(&mut ad.a);
                out.push(&mut ad.b);
            }
        }
        if self.config.train_adaln {
            for l in self.adaln.blocks.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            out.push(&mut self.adaln.final_layer.weight);
            out.push(&mut self.adaln.final_layer.bias);
        }
        out
    }

    /// Mutable access to any named tensor, for checkpoint loading.
    pub(crate) fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        fn pick<'a>(l: &'a mut Linear, field: &str) -> Option<&'a mut Tensor> {
            match field {
                "weight" => Some(&mut l.weight),
                "bias" => Some(&mut l.bias),
                _ => None,
            }
        }
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["prompt_table"] => Some(&mut self.prompt_table),
            ["patch_embed", f] => pick(&mut self.patch_embed, f),
            ["out_proj", f] => pick(&mut self.out_proj, f),
            ["adaln", "embed_in", f] => pick(&mut self.adaln.embed_in, f),
            ["adaln", "embed_out", f] => pick(&mut self.adaln.embed_out, f),
            ["adaln", "final", f] => pick(&mut self.adaln.final_layer, f),
            ["adaln", "blocks", i, f] => pick(self.adaln.blocks.get_mut(i.parse::<usize>().ok()?)?, f),
            ["positions", kind] => {
                let idx = self.layout().ok()?.kinds().position(|k| k.name() == *kind)?;
                self.positions.get_mut(idx)
            }
            ["blocks", i, proj, f] => {
                let p = Projection::ALL.into_iter().find(|p| p.name() == *proj)?;
                let block = self.blocks.get_mut(i.parse::<usize>().ok()?)?;
                match *f {
                    "lora_a" => block.adapters[p as usize].as_mut().map(|a| &mut a.a),
                    "lora_b" => block.adapters[p as usize].as_mut().map(|a| &mut a.b),
                    _ => pick(
                        match p {
                            Projection::Qkv => &mut block.qkv,
                            Projection::AttnOut => &mut block.attn_out,
                            Projection::MlpIn => &mut block.mlp_in,
                            Projection::MlpOut => &mut block.mlp_out,
                        },
                        f,
                    ),
                }
            }
            _ => None,
        }
    }
}

/// 2D sinusoidal table over a `grid × grid` token raster plus a random
/// per-segment offset, so the two images share spatial structure but stay
/// distinguishable.
fn grid_positions(grid: usize, d: usize, rng: &mut Rng) -> Tensor {
    let offset: Vec<f32> = (0..d).map(|_| 0.25 * rng.normal()).collect();
    let bands = (d / 4).max(1);
    Tensor::from_fn(&[grid * grid, d], |idx| {
        let (tok, f) = (idx / d, idx % d);
        let (r, c) = ((tok / grid) as f32, (tok % grid) as f32);
        let k = (f / 4) % bands;
        let omega = std::f32::consts::PI / grid as f32 * (1 << k) as f32;
        let v = match f % 4 {
            0 => (r * omega).sin(),
            1 => (r * omega).cos(),
            2 => (c * omega).sin(),
            _ => (c * omega).cos(),
        };
        0.5 * v + offset[f]
    })
}

/// Gradients aligned with [`ModelWeights::trainable`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(weights: &ModelWeights) -> Self {
        Gradients(weights.trainable().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for t in &mut self.0 {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}
