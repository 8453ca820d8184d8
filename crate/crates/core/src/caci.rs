//! Context-aware condition injection: every segment gets its own AdaLN-Zero
//! conditioning vector, built from a per-segment timestep (zero for clean
//! context, the diffusion time for the target side) and a per-segment pooled
//! prompt.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{SegmentKind, SegmentLayout};
use crate::model::Linear;
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimestepSource {
    /// Embedding of `t = 0`.
    Zero,
    /// The current diffusion time.
    Diffusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConditioningMode {
    #[serde(rename = "caci")]
    Caci,
    #[serde(rename = "synccond")]
    SyncCond,
    #[serde(rename = "caci-rel-t")]
    CaciRelDiffusion,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 3] =
        [ConditioningMode::Caci, ConditioningMode::SyncCond, ConditioningMode::CaciRelDiffusion];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningMode::Caci => "caci",
            ConditioningMode::SyncCond => "synccond",
            ConditioningMode::CaciRelDiffusion => "caci-rel-t",
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConditioningMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown conditioning mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub timestep: TimestepSource,
    /// Segment whose pooled prompt embedding feeds the conditioning vector.
    pub context: SegmentKind,
}

/// Per-segment routing, indexed by [`SegmentKind::index`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaciPlan {
    pub mode: ConditioningMode,
    pub segments: [SegmentPlan; 5],
}

pub fn caci_plan(mode: ConditioningMode) -> CaciPlan {
    use SegmentKind::*;
    use TimestepSource::*;
    let entry = |timestep, context| SegmentPlan { timestep, context };
    let mut segments = [
        entry(Zero, Rel),
        entry(Zero, IndCond),
        entry(Diffusion, IndTgt),
        entry(Zero, IndCond),
        entry(Diffusion, IndTgt),
    ];
    match mode {
        ConditioningMode::Caci => {}
        ConditioningMode::SyncCond => segments.iter_mut().for_each(|s| s.timestep = Diffusion),
        ConditioningMode::CaciRelDiffusion => segments[Rel.index()].timestep = Diffusion,
    }
    CaciPlan { mode, segments }
}

impl CaciPlan {
    pub fn entry(&self, seg: SegmentKind) -> SegmentPlan {
        self.segments[seg.index()]
    }

    /// The timestep actually fed to `seg` when the diffusion time is `t`.
    pub fn resolved_t(&self, seg: SegmentKind, t: f32) -> f32 {
        match self.entry(seg).timestep {
            TimestepSource::Zero => 0.0,
            TimestepSource::Diffusion => t,
        }
    }
}

/// Sinusoidal embedding of `t ∈ [0, 1]` rescaled to `[0, 1000]`: the first
/// half holds sines, the second half cosines.
pub fn timestep_embedding(t: f32, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("timestep embedding width {dim} must be even and positive")));
    }
    let half = dim / 2;
    let scaled = t as f64 * 1000.0;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = scaled * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    Ok(out)
}

/// Mean prompt embedding per text segment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PooledPrompts(pub [Option<Vec<f32>>; 5]);

impl PooledPrompts {
    /// Means over the rows of each text segment of `tokens`.
    pub fn from_tokens(tokens: &Tensor, layout: &SegmentLayout) -> Self {
        let d = tokens.cols();
        let mut out = PooledPrompts::default();
        for seg in layout.segments().iter().filter(|s| s.kind.is_text()) {
            let mut acc = vec![0f64; d];
            for r in seg.range() {
                for (a, &v) in acc.iter_mut().zip(tokens.row(r)) {
                    *a += v as f64;
                }
            }
            out.0[seg.kind.index()] = Some(acc.into_iter().map(|a| (a / seg.len as f64) as f32).collect());
        }
        out
    }

    pub fn get(&self, seg: SegmentKind) -> Option<&[f32]> {
        self.0[seg.index()].as_deref()
    }

    pub fn set(&mut self, seg: SegmentKind, v: Vec<f32>) {
        self.0[seg.index()] = Some(v);
    }
}

/// AdaLN parameters: a frozen conditioning embedder shared by all blocks, and
/// one zero-initialized modulation projection per block plus one for the
/// output layer. The same parameters serve every segment.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaLnWeights {
    pub embed_in: Linear,
    pub embed_out: Linear,
    /// `6d × d` each: attention shift/scale/gate, then MLP shift/scale/gate.
    pub blocks: Vec<Linear>,
    /// `2d × d`: output shift/scale.
    pub final_layer: Linear,
}

impl AdaLnWeights {
    pub fn init(d: usize, num_blocks: usize, rng: &mut Rng) -> Self {
        AdaLnWeights {
            embed_in: Linear::random(d, d, rng),
            embed_out: Linear::random(d, d, rng),
            blocks: (0..num_blocks).map(|_| Linear::zeros(6 * d, d)).collect(),
            final_layer: Linear::zeros(2 * d, d),
        }
    }

    pub fn width(&self) -> usize {
        self.embed_in.in_dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockModulation {
    pub shift_attn: Vec<f32>,
    pub scale_attn: Vec<f32>,
    pub gate_attn: Vec<f32>,
    pub shift_mlp: Vec<f32>,
    pub scale_mlp: Vec<f32>,
    pub gate_mlp: Vec<f32>,
}

impl BlockModulation {
    fn from_raw(raw: &[f32], d: usize) -> Self {
        let part = |i: usize| raw[i * d..(i + 1) * d].to_vec();
        BlockModulation {
            shift_attn: part(0),
            scale_attn: part(1),
            gate_attn: part(2),
            shift_mlp: part(3),
            scale_mlp: part(4),
            gate_mlp: part(5),
        }
    }
}

/// Everything one segment's tokens are modulated with, across all blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationEntry {
    /// `silu(embedder output)`: the input of every modulation projection.
    pub features: Vec<f32>,
    pub blocks: Vec<BlockModulation>,
    pub final_shift: Vec<f32>,
    pub final_scale: Vec<f32>,
}

impl ModulationEntry {
    /// Bit pattern of every value, for exact comparisons and hashing.
    pub fn bits(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.features.iter().map(|v| v.to_bits()).collect();
        for b in &self.blocks {
            for part in [&b.shift_attn, &b.scale_attn, &b.gate_attn, &b.shift_mlp, &b.scale_mlp, &b.gate_mlp] {
                out.extend(part.iter().map(|v| v.to_bits()));
            }
        }
        out.extend(self.final_shift.iter().chain(&self.final_scale).map(|v| v.to_bits()));
        out
    }
}

/// Modulation for each segment present in a layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModulationSet(pub [Option<ModulationEntry>; 5]);

impl ModulationSet {
    pub fn get(&self, seg: SegmentKind) -> Result<&ModulationEntry> {
        self.0[seg.index()].as_ref().ok_or_else(|| Error::Missing(format!("modulation entry for {seg}")))
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Conditioning for one segment: `embed(timestep_embedding(t') + pooled[ctx])`
/// with `t'` resolved by the plan, then projected by each block's modulation.
pub fn modulation_for(
    plan: &CaciPlan,
    seg: SegmentKind,
    t: f32,
    pooled: &PooledPrompts,
    weights: &AdaLnWeights,
) -> Result<ModulationEntry> {
    let d = weights.width();
    let entry = plan.entry(seg);
    let ctx = pooled
        .get(entry.context)
        .ok_or_else(|| Error::Missing(format!("pooled prompt for {} (context of {seg})", entry.context)))?;
    if ctx.len() != d {
        return Err(Error::shape("modulation_for", format!("pooled width {} vs conditioning width {d}", ctx.len())));
    }
    let mut c = timestep_embedding(plan.resolved_t(seg, t), d)?;
    for (a, b) in c.iter_mut().zip(ctx) {
        *a += b;
    }
    let hidden: Vec<f32> = weights.embed_in.apply_vec(&c).into_iter().map(silu).collect();
    let features: Vec<f32> = weights.embed_out.apply_vec(&hidden).into_iter().map(silu).collect();
    let blocks = weights.blocks.iter().map(|l| BlockModulation::from_raw(&l.apply_vec(&features), d)).collect();
    let fin = weights.final_layer.apply_vec(&features);
    Ok(ModulationEntry { blocks, final_shift: fin[..d].to_vec(), final_scale: fin[d..].to_vec(), features })
}

/// Modulation entries for every segment of `layout`.
pub fn modulation_set(
    plan: &CaciPlan,
    layout: &SegmentLayout,
    t: f32,
    pooled: &PooledPrompts,
    weights: &AdaLnWeights,
) -> Result<ModulationSet> {
    let mut set = ModulationSet::default();
    for kind in layout.kinds() {
        set.0[kind.index()] = Some(modulation_for(plan, kind, t, pooled, weights)?);
    }
    Ok(set)
}
