//! Shot segmentation, keyframe scoring, filtering and adjacent pairing over
//! frame streams, with pluggable scorers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};
use crate::world::{render_scene, sample_scene, EditPattern, Scene};

/// Ordered frames of equal shape.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStream {
    frames: Vec<Tensor>,
    /// Indices of frames that open a new shot, for tests.
    pub planted_cuts: Option<Vec<usize>>,
}

impl FrameStream {
    pub fn new(frames: Vec<Tensor>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::invalid(format!("a frame stream needs at least 2 frames, got {}", frames.len())));
        }
        let shape = frames[0].shape().to_vec();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != shape.as_slice()) {
            return Err(Error::shape(
                "frame stream",
                format!("frame {i} has shape {:?}, expected {shape:?}", f.shape()),
            ));
        }
        Ok(FrameStream { frames, planted_cuts: None })
    }

    pub fn with_planted_cuts(mut self, cuts: Vec<usize>) -> Self {
        self.planted_cuts = Some(cuts);
        self
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, i: usize) -> &Tensor {
        &self.frames[i]
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    /// Stacks the frames into one `n × h × w × c` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let mut shape = vec![self.frames.len()];
        shape.extend_from_slice(self.frames[0].shape());
        let data = self.frames.iter().flat_map(|f| f.data().iter().copied()).collect();
        Tensor::new(shape, data).expect("uniform frames")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() < 2 {
            return Err(Error::shape("frame stream", format!("rank {} tensor", t.rank())));
        }
        let n = t.shape()[0];
        let frame_shape = t.shape()[1..].to_vec();
        let per: usize = frame_shape.iter().product();
        let frames = (0..n)
            .map(|i| Tensor::new(frame_shape.clone(), t.data()[i * per..(i + 1) * per].to_vec()))
            .collect::<Result<_>>()?;
        FrameStream::new(frames)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor(&Tensor::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor().save(path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSpan {
    pub start: usize,
    pub end: usize,
}

impl ShotSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }
}

/// Mean absolute difference between two frames.
pub fn frame_difference(a: &Tensor, b: &Tensor) -> f64 {
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum();
    sum / a.len().max(1) as f64
}

/// Declares a cut wherever consecutive frames differ by more than `threshold`.
pub fn detect_shots(stream: &FrameStream, threshold: f64) -> Result<Vec<ShotSpan>> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::invalid(format!("cut threshold {threshold} must be positive")));
    }
    let mut spans = Vec::new();
    let mut start = 0;
    for i in 0..stream.len() - 1 {
        if frame_difference(stream.frame(i), stream.frame(i + 1)) > threshold {
            spans.push(ShotSpan { start, end: i + 1 });
            start = i + 1;
        }
    }
    spans.push(ShotSpan { start, end: stream.len() });
    Ok(spans)
}

pub type FrameScore = Box<dyn Fn(usize, &Tensor) -> f64 + Send + Sync>;
pub type SpanScore = Box<dyn Fn(&FrameStream, ShotSpan) -> f64 + Send + Sync>;
pub type FrameFlag = Box<dyn Fn(usize, &Tensor) -> bool + Send + Sync>;

/// Scorers consulted by the pipeline. Frame scorers receive the frame's
/// stream index alongside its pixels.
pub struct ScorerSet {
    pub aesthetic: FrameScore,
    pub quality: FrameScore,
    pub motion: SpanScore,
    pub text_overlay: FrameFlag,
    pub nsfw: FrameFlag,
}

fn luminance(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Closeness of the saturated-pixel centroid to the frame center, in `[0, 1]`.
pub fn centrality_score(frame: &Tensor) -> f64 {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let (mut sx, mut sy, mut sw) = (0f64, 0f64, 0f64);
    for r in 0..h {
        for c in 0..w {
            let px = &frame.data()[(r * w + c) * 3..(r * w + c) * 3 + 3];
            let hi = px.iter().cloned().fold(f32::MIN, f32::max);
            let lo = px.iter().cloned().fold(f32::MAX, f32::min);
            let sat = (hi - lo) as f64;
            sx += sat * (c as f64 + 0.5) / w as f64;
            sy += sat * (r as f64 + 0.5) / h as f64;
            sw += sat;
        }
    }
    if sw <= 0.0 {
        return 0.0;
    }
    let d = ((sx / sw - 0.5).powi(2) + (sy / sw - 0.5).powi(2)).sqrt();
    (1.0 - d / std::f64::consts::FRAC_1_SQRT_2).clamp(0.0, 1.0)
}

/// Standard deviation of luminance.
pub fn contrast_score(frame: &Tensor) -> f64 {
    let lum: Vec<f64> = frame.data().chunks_exact(3).map(|p| luminance(p) as f64).collect();
    let n = lum.len().max(1) as f64;
    let mean = lum.iter().sum::<f64>() / n;
    (lum.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean consecutive-frame difference inside a span; 0 for single frames.
pub fn span_motion(stream: &FrameStream, span: ShotSpan) -> f64 {
    if span.len() < 2 {
        return 0.0;
    }
    let total: f64 = (span.start..span.end - 1).map(|i| frame_difference(stream.frame(i), stream.frame(i + 1))).sum();
    total / (span.len() - 1) as f64
}

impl ScorerSet {
    /// Heuristic scorers: subject centrality as aesthetics, luminance
    /// contrast as quality, inter-frame difference as motion, and no
    /// rejections.
    pub fn synthetic() -> Self {
        ScorerSet {
            aesthetic: Box::new(|_, f| centrality_score(f)),
            quality: Box::new(|_, f| contrast_score(f)),
            motion: Box::new(span_motion),
            text_overlay: Box::new(|_, _| false),
            nsfw: Box::new(|_, _| false),
        }
    }

    /// Scorers backed by per-frame tables; a span's motion is the mean of
    /// its frames' entries.
    pub fn planted(aesthetic: Vec<f64>, quality: Vec<f64>, motion: Vec<f64>, text: Vec<bool>, nsfw: Vec<bool>) -> Self {
        ScorerSet {
            aesthetic: Box::new(move |i, _| aesthetic[i]),
            quality: Box::new(move |i, _| quality[i]),
            motion: Box::new(move |_, s| motion[s.start..s.end].iter().sum::<f64>() / s.len() as f64),
            text_overlay: Box::new(move |i, _| text[i]),
            nsfw: Box::new(move |i, _| nsfw[i]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeRecord {
    pub span: ShotSpan,
    pub frame: usize,
    pub aesthetic: f64,
    pub quality: f64,
    pub motion: f64,
    pub text_overlay: bool,
    pub nsfw: bool,
}

fn finite(v: f64, what: &str, i: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} score for frame {i}")))
    }
}

/// Drops high-motion spans and keeps each remaining span's best-looking
/// frame among every `stride`-th frame (ties go to the earliest).
pub fn select_keyframes(
    stream: &FrameStream,
    spans: &[ShotSpan],
    scorers: &ScorerSet,
    motion_cutoff: f64,
    stride: usize,
) -> Result<Vec<KeyframeRecord>> {
    if stride == 0 {
        return Err(Error::invalid("frame stride must be at least 1"));
    }
    let mut out = Vec::new();
    for &span in spans {
        if span.is_empty() || span.end > stream.len() {
            return Err(Error::invalid(format!(
                "span {}..{} invalid for {} frames",
                span.start,
                span.end,
                stream.len()
            )));
        }
        let motion = finite((scorers.motion)(stream, span), "motion", span.start)?;
        if motion > motion_cutoff {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for i in (span.start..span.end).step_by(stride) {
            let a = finite((scorers.aesthetic)(i, stream.frame(i)), "aesthetic", i)?;
            if best.is_none_or(|(_, b)| a > b) {
                best = Some((i, a));
            }
        }
        let (frame, aesthetic) = best.expect("nonempty span");
        let img = stream.frame(frame);
        out.push(KeyframeRecord {
            span,
            frame,
            aesthetic,
            quality: finite((scorers.quality)(frame, img), "quality", frame)?,
            motion,
            text_overlay: (scorers.text_overlay)(frame, img),
            nsfw: (scorers.nsfw)(frame, img),
        });
    }
    if out.is_empty() {
        log::warn!("every shot exceeded the motion cutoff {motion_cutoff}");
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub aesthetic: f64,
    pub quality: f64,
}

impl FilterThresholds {
    pub fn permissive() -> Self {
        FilterThresholds { aesthetic: f64::NEG_INFINITY, quality: f64::NEG_INFINITY }
    }
}

pub fn passes(r: &KeyframeRecord, th: &FilterThresholds) -> bool {
    r.aesthetic >= th.aesthetic && r.quality >= th.quality && !r.text_overlay && !r.nsfw
}

/// Keeps records meeting both thresholds with neither rejection flag set.
/// Flags come from the scorers at selection time.
pub fn filter_keyframes(records: &[KeyframeRecord], thresholds: &FilterThresholds) -> Vec<KeyframeRecord> {
    records.iter().filter(|r| passes(r, thresholds)).copied().collect()
}

/// Pairs each record with its successor.
pub fn pair_adjacent(records: &[KeyframeRecord]) -> Vec<(KeyframeRecord, KeyframeRecord)> {
    records.windows(2).map(|w| (w[0], w[1])).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub cut_threshold: f64,
    pub motion_cutoff: f64,
    pub stride: usize,
    pub thresholds: FilterThresholds,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cut_threshold: 0.08,
            motion_cutoff: 0.05,
            stride: 1,
            thresholds: FilterThresholds { aesthetic: 0.3, quality: 0.02 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub spans: Vec<ShotSpan>,
    pub keyframes: Vec<KeyframeRecord>,
    pub survivors: Vec<KeyframeRecord>,
    pub pairs: Vec<(KeyframeRecord, KeyframeRecord)>,
}

pub fn run_pipeline(stream: &FrameStream, scorers: &ScorerSet, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let spans = detect_shots(stream, cfg.cut_threshold)?;
    let keyframes = select_keyframes(stream, &spans, scorers, cfg.motion_cutoff, cfg.stride)?;
    let survivors = filter_keyframes(&keyframes, &cfg.thresholds);
    let pairs = pair_adjacent(&survivors);
    Ok(PipelineOutput { spans, keyframes, survivors, pairs })
}

/// Renders `shots` independent scenes with small per-frame camera drift.
/// Consecutive shots use different palettes, so every boundary is a clear
/// cut; the boundaries are recorded as planted cuts.
pub fn synthetic_stream(
    seed: u64,
    shots: usize,
    frames_per_shot: usize,
    size: usize,
    drift: f32,
) -> Result<FrameStream> {
    if shots == 0 || frames_per_shot == 0 || shots * frames_per_shot < 2 {
        return Err(Error::invalid("stream needs at least two frames"));
    }
    let root = Rng::new(seed);
    let mut frames = Vec::with_capacity(shots * frames_per_shot);
    let mut cuts = Vec::new();
    let mut prev: Option<Scene> = None;
    for s in 0..shots {
        let mut rng = root.substream_indexed("shot", s as u64);
        let mut scene = sample_scene(&mut rng, EditPattern::MultiAngle);
        while prev.is_some_and(|p| p.palette == scene.palette) {
            scene = sample_scene(&mut rng, EditPattern::MultiAngle);
        }
        scene.lighting = 1.0;
        scene.camera.zoom = 1.0;
        if s > 0 {
            cuts.push(frames.len());
        }
        for f in 0..frames_per_shot {
            let mut sc = scene;
            sc.camera.cx += drift * f as f32;
            frames.push(render_scene(&sc, size));
        }
        prev = Some(scene);
    }
    Ok(FrameStream::new(frames)?.with_planted_cuts(cuts))
}
