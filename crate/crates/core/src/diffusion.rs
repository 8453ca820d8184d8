//! Rectified-flow objective, two-stage training and the Euler sampler.
//!
//! Targets are interpolated as `z_t = (1 - t)·z0 + t·eps` and the model
//! regresses the velocity `eps - z0` on target-shot tokens only. The
//! condition shot always enters clean.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::caci::{caci_plan, modulation_set, CaciPlan, ConditioningMode, PooledPrompts};
use crate::error::{Error, Result};
use crate::layout::{concat_model_input, concat_model_input_without_rel, ModelInput, SegmentKind, SegmentLayout};
use crate::model::{
    decode_latent, encode_image, forward_cached, model_backward, model_forward, Gradients, ModelWeights,
};
use crate::tensor::{Rng, Tensor};
use crate::world::{prompt_codes, HierarchicalPrompt, PromptCodes, ShotPair};

/// One draw of the forward noising process.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisingState {
    pub z0: Tensor,
    pub eps: Tensor,
    pub t: f32,
    pub zt: Tensor,
}

impl NoisingState {
    pub fn velocity(&self) -> Tensor {
        let data = self.eps.data().iter().zip(self.z0.data()).map(|(e, z)| e - z).collect();
        Tensor::new(self.z0.shape().to_vec(), data).expect("same shape")
    }
}

/// `(1 - t)·z0 + t·eps`.
pub fn interpolate(z0: &Tensor, eps: &Tensor, t: f32) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape("interpolate", format!("{:?} vs {:?}", z0.shape(), eps.shape())));
    }
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| (1.0 - t) * z + t * e).collect();
    Tensor::new(z0.shape().to_vec(), data)
}

pub fn noise_target(z0: &Tensor, t: f32, rng: &mut Rng) -> Result<NoisingState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("noise level {t} outside [0, 1]")));
    }
    let eps = Tensor::from_fn(z0.shape(), |_| rng.normal());
    let zt = interpolate(z0, &eps, t)?;
    Ok(NoisingState { z0: z0.clone(), eps, t, zt })
}

/// Assembles the model input from prompt codes and latent patches.
pub fn build_input(
    weights: &ModelWeights,
    codes: &PromptCodes,
    cond_latent: &Tensor,
    tgt_latent: &Tensor,
    t: f32,
) -> Result<ModelInput> {
    let ic = weights.embed_prompt(&codes.ind_cond)?;
    let it = weights.embed_prompt(&codes.ind_tgt)?;
    let zc = weights.embed_latent(cond_latent)?;
    let zt = weights.embed_latent(tgt_latent)?;
    if weights.config.use_rel {
        let rel = weights.embed_prompt(&codes.rel)?;
        concat_model_input(&rel, &ic, &it, &zc, &zt, t)
    } else {
        concat_model_input_without_rel(&ic, &it, &zc, &zt, t)
    }
}

/// Pads or trims prompt codes to the model's segment lengths.
pub fn codes_for_model(
    weights: &ModelWeights,
    prompt: &HierarchicalPrompt,
    dropout: f32,
    rng: &mut Rng,
    training: bool,
) -> Result<PromptCodes> {
    let c = &weights.config;
    prompt_codes(prompt, c.rel_len.max(1), c.ind_len, dropout, rng, training)
}

/// A ready-to-run training input with its velocity target.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub input: ModelInput,
    /// `target tokens × latent width`
    pub target: Tensor,
}

fn vis_tgt_rows(layout: &SegmentLayout) -> Result<std::ops::Range<usize>> {
    layout.range(SegmentKind::VisTgt).ok_or_else(|| Error::Missing("target segment in layout".into()))
}

/// Mean squared error between `output` rows of the target segment and
/// `target`; other rows are ignored.
pub fn training_loss(output: &Tensor, layout: &SegmentLayout, target: &Tensor) -> Result<f64> {
    training_loss_grad(output, layout, target).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the full output sequence.
pub fn training_loss_grad(output: &Tensor, layout: &SegmentLayout, target: &Tensor) -> Result<(f64, Tensor)> {
    segment_loss_grad(output, layout, &[(SegmentKind::VisTgt, target)])
}

/// Mean squared error over the listed segments' rows, pooled across all
/// their elements, with its gradient over the full output.
pub fn segment_loss_grad(
    output: &Tensor,
    layout: &SegmentLayout,
    targets: &[(SegmentKind, &Tensor)],
) -> Result<(f64, Tensor)> {
    let (n, p) = output.dims2()?;
    if n != layout.total() {
        return Err(Error::shape(
            "training_loss",
            format!("output {:?}, layout total {}", output.shape(), layout.total()),
        ));
    }
    let mut count = 0usize;
    for (kind, target) in targets {
        let rows = layout.range(*kind).ok_or_else(|| Error::Missing(format!("segment {kind} in layout")))?;
        if target.shape() != [rows.len(), p] {
            return Err(Error::shape(
                "training_loss",
                format!("{kind} target {:?}, expected [{}, {p}]", target.shape(), rows.len()),
            ));
        }
        count += target.len();
    }
    if count == 0 {
        return Err(Error::invalid("loss over no elements"));
    }
    let mut sum = 0f64;
    let mut grad = Tensor::zeros(&[n, p]);
    for (kind, target) in targets {
        let rows = layout.range(*kind).expect("checked above");
        let pred = &output.data()[rows.start * p..rows.end * p];
        let g = &mut grad.data_mut()[rows.start * p..rows.end * p];
        for ((gi, &y), &tv) in g.iter_mut().zip(pred).zip(target.data()) {
            let r = (y - tv) as f64;
            sum += r * r;
            *gi = (2.0 * r / count as f64) as f32;
        }
    }
    let loss = sum / count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    Ok((loss, grad))
}

/// Mean loss over `batch` and the matching mean gradient. Elements are
/// reduced in order.
pub fn batch_loss_and_grad(
    weights: &ModelWeights,
    batch: &[TrainingSample],
    plan: &CaciPlan,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut total = 0f64;
    let mut grads = Gradients::zeros_like(weights);
    for s in batch {
        let (out, cache) = forward_cached(&s.input, plan, weights)?;
        let (loss, d_out) = training_loss_grad(&out, &s.input.layout, &s.target)?;
        total += loss;
        grads.add_assign(&model_backward(&cache, d_out.data(), weights));
    }
    grads.scale(1.0 / batch.len() as f32);
    Ok((total / batch.len() as f64, grads))
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, weights: &ModelWeights) -> Self {
        let zeros: Vec<Vec<f32>> = weights.trainable().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, weights: &mut ModelWeights, grads: &Gradients) -> Result<()> {
        let params = weights.trainable_mut();
        if params.len() != grads.0.len() || params.len() != self.m.len() {
            return Err(Error::shape("adam", format!("{} parameters, {} gradients", params.len(), grads.0.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageMode {
    #[serde(rename = "two-stage")]
    TwoStage,
    #[serde(rename = "raw-only")]
    RawOnly,
    #[serde(rename = "curated-only")]
    CuratedOnly,
}

impl StageMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StageMode::TwoStage => "two-stage",
            StageMode::RawOnly => "raw-only",
            StageMode::CuratedOnly => "curated-only",
        }
    }
}

impl fmt::Display for StageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [StageMode::TwoStage, StageMode::RawOnly, StageMode::CuratedOnly]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Curated,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Raw => "raw",
            Stage::Curated => "curated",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    /// Broad-stage steps; `None` means two passes over the broad set.
    pub raw_steps: Option<usize>,
    pub curated_steps: usize,
    pub stage: StageMode,
    pub conditioning: ConditioningMode,
    pub dropout: f32,
    pub seed: u64,
    /// Record per-segment modulation hashes for every drawn `t`.
    #[serde(default)]
    pub probe_modulation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 16,
            raw_steps: None,
            curated_steps: 500,
            stage: StageMode::TwoStage,
            conditioning: ConditioningMode::Caci,
            dropout: 0.2,
            seed: 0,
            probe_modulation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1]", self.dropout)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    fn raw_steps_for(&self, n: usize) -> usize {
        self.raw_steps.unwrap_or_else(|| (2 * n).div_ceil(self.batch_size))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based, counted across stages.
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
}

/// Modulation hashes for one drawn `t`, indexed by segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationProbe {
    pub step: usize,
    pub t: f32,
    pub hashes: [Option<u64>; 5],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub losses: Vec<LossRecord>,
    pub probes: Vec<ModulationProbe>,
}

/// Latents and prompt of one pair, encoded once.
struct Encoded {
    cond: Tensor,
    tgt: Tensor,
    prompt: HierarchicalPrompt,
}

fn encode_pairs(weights: &ModelWeights, pairs: &[ShotPair]) -> Result<Vec<Encoded>> {
    let p = weights.config.patch_size;
    let size = weights.config.image_size;
    pairs
        .iter()
        .map(|pair| {
            if pair.cond.shape() != [size, size, 3] || pair.tgt.shape() != [size, size, 3] {
                return Err(Error::shape(
                    "training pair",
                    format!("pair {} image {:?}, model expects {size}×{size}×3", pair.id, pair.cond.shape()),
                ));
            }
            Ok(Encoded { cond: encode_image(&pair.cond, p)?, tgt: encode_image(&pair.tgt, p)?, prompt: pair.prompt })
        })
        .collect()
}

fn hash_bits(bits: &[u32]) -> u64 {
    let mut h = Sha256::new();
    for b in bits {
        h.update(b.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn probe(weights: &ModelWeights, plan: &CaciPlan, input: &ModelInput, step: usize) -> Result<ModulationProbe> {
    let pooled = PooledPrompts::from_tokens(&input.tokens, &input.layout);
    let set = modulation_set(plan, &input.layout, input.diffusion_t, &pooled, &weights.adaln)?;
    let hashes = std::array::from_fn(|k| set.0[k].as_ref().map(|e| hash_bits(&e.bits())));
    Ok(ModulationProbe { step, t: input.diffusion_t, hashes })
}

/// Draws `t` uniformly on the open interval `(0, 1)`.
fn draw_t(rng: &mut Rng) -> f32 {
    loop {
        let t = rng.uniform();
        if t > 0.0 {
            return t;
        }
    }
}

struct StageRun<'a> {
    stage: Stage,
    data: &'a [Encoded],
    steps: usize,
}

/// Broad then curated training of the trainable parameters of `init`.
pub fn train_two_stage(
    init: ModelWeights,
    raw: &[ShotPair],
    curated: &[ShotPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut weights = init;
    let raw_enc = encode_pairs(&weights, raw)?;
    let cur_enc = encode_pairs(&weights, curated)?;
    let mut stages = Vec::new();
    if matches!(cfg.stage, StageMode::TwoStage | StageMode::RawOnly) {
        let steps = cfg.raw_steps_for(raw.len());
        if steps > 0 && raw.is_empty() {
            return Err(Error::Missing("broad-stage dataset is empty".into()));
        }
        stages.push(StageRun { stage: Stage::Raw, data: &raw_enc, steps });
    }
    if matches!(cfg.stage, StageMode::TwoStage | StageMode::CuratedOnly) {
        if cfg.curated_steps > 0 && curated.is_empty() {
            return Err(Error::Missing("curated-stage dataset is empty".into()));
        }
        stages.push(StageRun { stage: Stage::Curated, data: &cur_enc, steps: cfg.curated_steps });
    }

    let plan = caci_plan(cfg.conditioning);
    let mut adam = Adam::new(cfg.lr, &weights);
    let mut losses = Vec::new();
    let mut probes = Vec::new();
    let root = Rng::new(cfg.seed);
    let mut step = 0;
    for run in &stages {
        let mut rng = root.substream(&format!("train.{}", run.stage));
        for _ in 0..run.steps {
            step += 1;
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let ex = &run.data[rng.below(run.data.len())];
                let t = draw_t(&mut rng);
                let noised = noise_target(&ex.tgt, t, &mut rng)?;
                let codes = codes_for_model(&weights, &ex.prompt, cfg.dropout, &mut rng, true)?;
                let input = build_input(&weights, &codes, &ex.cond, &noised.zt, t)?;
                batch.push(TrainingSample { input, target: noised.velocity() });
            }
            if cfg.probe_modulation {
                for s in &batch {
                    let mut probe_input = s.input.clone();
                    probe_input.tokens = batch[0].input.tokens.clone();
                    probes.push(probe(&weights, &plan, &probe_input, step)?);
                }
            }
            let (loss, grads) = batch_loss_and_grad(&weights, &batch, &plan)
                .map_err(|e| Error::NonFinite(format!("{} stage, step {step}: {e}", run.stage)))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("{} stage, step {step}: loss {loss}", run.stage)));
            }
            adam.step(&mut weights, &grads)?;
            losses.push(LossRecord { step, stage: run.stage, loss });
            if step % 100 == 0 {
                log::info!("{} step {step}: loss {loss:.5}", run.stage);
            }
        }
    }
    Ok(TrainOutcome { weights, losses, probes })
}

pub fn write_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,stage,loss")?;
    for r in losses {
        writeln!(out, "{},{},{:.9e}", r.step, r.stage, r.loss)?;
    }
    out.flush()?;
    Ok(())
}

/// A generated shot plus the condition tokens seen at every step.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub image: Tensor,
    pub latent: Tensor,
    pub vis_cond: Vec<Tensor>,
}

/// Euler integration of the learned velocity from pure noise at `t = 1`
/// down to `t = 0`.
pub fn sample_next_shot(
    weights: &ModelWeights,
    cond_image: &Tensor,
    prompt: &HierarchicalPrompt,
    steps: usize,
    plan: &CaciPlan,
    rng: &mut Rng,
) -> Result<Tensor> {
    sample_next_shot_traced(weights, cond_image, prompt, steps, plan, rng).map(|s| s.image)
}

pub fn sample_next_shot_traced(
    weights: &ModelWeights,
    cond_image: &Tensor,
    prompt: &HierarchicalPrompt,
    steps: usize,
    plan: &CaciPlan,
    rng: &mut Rng,
) -> Result<SampleTrace> {
    if steps == 0 {
        return Err(Error::invalid("sampling needs at least one step"));
    }
    let cfg = &weights.config;
    let cond = encode_image(cond_image, cfg.patch_size)?;
    let codes = codes_for_model(weights, prompt, 0.0, rng, false)?;
    let mut z = Tensor::from_fn(cond.shape(), |_| rng.normal());
    let mut vis_cond = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = 1.0 - k as f32 / steps as f32;
        let t_next = 1.0 - (k + 1) as f32 / steps as f32;
        let input = build_input(weights, &codes, &cond, &z, t)?;
        vis_cond.push(input.extract(SegmentKind::VisCond)?);
        let out = model_forward(&input, plan, weights)?;
        let rows = vis_tgt_rows(&input.layout)?;
        let p = cfg.latent_width();
        let v = &out.data()[rows.start * p..rows.end * p];
        let dt = t_next - t;
        for (zi, vi) in z.data_mut().iter_mut().zip(v) {
            *zi += dt * vi;
        }
    }
    let image = decode_latent(&z, cfg.patch_size, cfg.image_size)?;
    Ok(SampleTrace { image, latent: z, vis_cond })
}
