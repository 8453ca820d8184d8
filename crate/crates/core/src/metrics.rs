//! Embedding-cosine consistency, prompt fidelity and Fréchet distance.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{psd_sqrt_f64, Rng, Tensor};
use crate::world::{IndividualPrompt, PALETTE_COLORS, SUBJECT_COLORS, SUBJECT_RADII, ZOOM_LEVELS};

/// Diagonal shrinkage added to every covariance estimate.
pub const COV_SHRINKAGE: f64 = 1e-6;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub trait Embedder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, image: &Tensor) -> Result<Vec<f64>>;
}

pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed_prompt(&self, prompt: &IndividualPrompt) -> Vec<f64>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", format!("lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn check_rgb(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w, 3] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::shape("embed", format!("expected h×w×3 image, got {s:?}"))),
    }
}

fn chroma(c: [f32; 3]) -> [f64; 3] {
    let s = (c[0] + c[1] + c[2]) as f64;
    [c[0] as f64 / s, c[1] as f64 / s, c[2] as f64 / s]
}

/// Attribute-level embedder: a soft histogram of pixel chromaticity over the
/// generator's subject and background colors, followed by subject-mask
/// moments and mean brightness. Lighting scales every channel equally and
/// leaves chromaticity unchanged.
#[derive(Clone, Debug)]
pub struct OracleEmbedder {
    prototypes: Vec<[f64; 3]>,
    temperature: f64,
}

impl Default for OracleEmbedder {
    fn default() -> Self {
        let prototypes = SUBJECT_COLORS.iter().chain(PALETTE_COLORS.iter()).map(|&c| chroma(c)).collect();
        OracleEmbedder { prototypes, temperature: 2e-4 }
    }
}

const MOMENTS: usize = 4;

impl OracleEmbedder {
    fn subject_slots(&self) -> usize {
        SUBJECT_COLORS.len()
    }
}

impl Embedder for OracleEmbedder {
    fn name(&self) -> &str {
        "oracle"
    }

    fn dim(&self) -> usize {
        self.prototypes.len() + MOMENTS
    }

    fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        let (h, w) = check_rgb(image)?;
        let k = self.prototypes.len();
        let mut hist = vec![0f64; k];
        let (mut mass, mut sx, mut sy, mut subject, mut bright) = (0f64, 0f64, 0f64, 0f64, 0f64);
        let mut weights = vec![0f64; k];
        for r in 0..h {
            for c in 0..w {
                let px = &image.data()[(r * w + c) * 3..(r * w + c) * 3 + 3];
                bright += px.iter().map(|&v| v as f64).sum::<f64>() / 3.0;
                if px.iter().map(|&v| v as f64).sum::<f64>() < 0.05 {
                    continue;
                }
                let ch = chroma([px[0], px[1], px[2]]);
                let dists: Vec<f64> = self
                    .prototypes
                    .iter()
                    .map(|p| p.iter().zip(&ch).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .collect();
                let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                let mut z = 0.0;
                for (wt, d) in weights.iter_mut().zip(&dists) {
                    *wt = (-(d - best) / self.temperature).exp();
                    z += *wt;
                }
                let mut subj = 0.0;
                for (i, (hv, wt)) in hist.iter_mut().zip(&weights).enumerate() {
                    *hv += wt / z;
                    if i < self.subject_slots() {
                        subj += wt / z;
                    }
                }
                mass += 1.0;
                subject += subj;
                sx += subj * ((c as f64 + 0.5) / w as f64 - 0.5);
                sy += subj * ((r as f64 + 0.5) / h as f64 - 0.5);
            }
        }
        let pixels = (h * w) as f64;
        let mut out: Vec<f64> = hist.iter().map(|v| v / mass.max(1.0)).collect();
        let (cx, cy) = if subject > 0.0 { (sx / subject, sy / subject) } else { (0.0, 0.0) };
        out.extend_from_slice(&[subject / pixels, cx, cy, bright / pixels]);
        Ok(out)
    }
}

/// Maps an individual prompt into the [`OracleEmbedder`] space from its
/// subject color, palette, size, shot size and composition codes.
#[derive(Clone, Debug, Default)]
pub struct PromptOracleEmbedder;

impl TextEmbedder for PromptOracleEmbedder {
    fn dim(&self) -> usize {
        SUBJECT_COLORS.len() + PALETTE_COLORS.len() + MOMENTS
    }

    fn embed_prompt(&self, p: &IndividualPrompt) -> Vec<f64> {
        let mut v = vec![0f64; self.dim()];
        let r = SUBJECT_RADII[p.size as usize % SUBJECT_RADII.len()] as f64;
        let zoom = ZOOM_LEVELS[p.shot_size as usize % ZOOM_LEVELS.len()] as f64;
        let area = (std::f64::consts::PI * (r * zoom).powi(2)).min(0.6);
        v[p.color as usize % SUBJECT_COLORS.len()] = area;
        v[SUBJECT_COLORS.len() + p.palette as usize % PALETTE_COLORS.len()] = 1.0 - area;
        let base = SUBJECT_COLORS.len() + PALETTE_COLORS.len();
        v[base] = area;
        v[base + 1] = (p.composition as f64 + 0.5) / 3.0 - 0.5;
        v
    }
}

/// Fixed random projection of an 8×8 box-downsampled image.
#[derive(Clone, Debug)]
pub struct ProjectionEmbedder {
    weights: Vec<f64>,
    dim: usize,
}

const GRID: usize = 8;

impl ProjectionEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let input = GRID * GRID * 3;
        let mut rng = Rng::new(seed).substream("metrics.projection");
        let std = 1.0 / (input as f64).sqrt();
        let weights = (0..dim * input).map(|_| rng.normal() as f64 * std).collect();
        ProjectionEmbedder { weights, dim }
    }
}

impl Default for ProjectionEmbedder {
    fn default() -> Self {
        ProjectionEmbedder::new(32, 0x5eed)
    }
}

fn downsample(image: &Tensor, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0f64; GRID * GRID * 3];
    let mut count = vec![0f64; GRID * GRID];
    for r in 0..h {
        for c in 0..w {
            let cell = (r * GRID / h) * GRID + c * GRID / w;
            count[cell] += 1.0;
            for ch in 0..3 {
                out[cell * 3 + ch] += image.data()[(r * w + c) * 3 + ch] as f64;
            }
        }
    }
    for (cell, n) in count.iter().enumerate() {
        for ch in 0..3 {
            let v = &mut out[cell * 3 + ch];
            *v = if *n > 0.0 { *v / n - 0.5 } else { 0.0 };
        }
    }
    out
}

impl Embedder for ProjectionEmbedder {
    fn name(&self) -> &str {
        "projection"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        let (h, w) = check_rgb(image)?;
        let x = downsample(image, h, w);
        Ok(self.weights.chunks_exact(x.len()).map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect())
    }
}

fn mean_of(values: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let (mut sum, mut n) = (0f64, 0usize);
    for v in values {
        sum += v?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no pairs to average"));
    }
    Ok(sum / n as f64)
}

/// Mean cosine between embeddings of aligned condition and generated images.
pub fn consistency(embedder: &dyn Embedder, conds: &[Tensor], gens: &[Tensor]) -> Result<f64> {
    if conds.len() != gens.len() {
        return Err(Error::shape("consistency", format!("{} conditions, {} generations", conds.len(), gens.len())));
    }
    mean_of(conds.iter().zip(gens).map(|(c, g)| cosine(&embedder.embed(c)?, &embedder.embed(g)?)))
}

/// Mean cosine between generated images and their target prompts.
pub fn text_fidelity(
    image: &dyn Embedder,
    text: &dyn TextEmbedder,
    gens: &[Tensor],
    prompts: &[IndividualPrompt],
) -> Result<f64> {
    if gens.len() != prompts.len() {
        return Err(Error::shape("text_fidelity", format!("{} images, {} prompts", gens.len(), prompts.len())));
    }
    if image.dim() != text.dim() {
        return Err(Error::shape("text_fidelity", format!("image width {}, text width {}", image.dim(), text.dim())));
    }
    mean_of(gens.iter().zip(prompts).map(|(g, p)| cosine(&image.embed(g)?, &text.embed_prompt(p))))
}

/// Mean and sample covariance of a set of equal-length vectors.
pub fn mean_cov(set: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = set.len();
    if n < 2 {
        return Err(Error::invalid(format!("covariance needs at least 2 samples, got {n}")));
    }
    let d = set[0].len();
    if set.iter().any(|v| v.len() != d) {
        return Err(Error::shape("covariance", "vectors of different lengths".to_string()));
    }
    let mut mean = vec![0f64; d];
    for v in set {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0f64; d * d];
    for v in set {
        for i in 0..d {
            let di = v[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (v[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let c = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = c;
            cov[j * d + i] = c;
        }
    }
    Ok((mean, cov))
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0f64; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Fréchet distance between Gaussian fits of two sets, with
/// [`COV_SHRINKAGE`] on the covariance diagonals.
pub fn fid(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    fid_with_shrinkage(set_a, set_b, COV_SHRINKAGE)
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2·(Σa^½ Σb Σa^½)^½)`. The inner matrix is
/// symmetric PSD and shares its spectrum with `Σa Σb`.
pub fn fid_with_shrinkage(set_a: &[Vec<f64>], set_b: &[Vec<f64>], shrinkage: f64) -> Result<f64> {
    let (ma, mut ca) = mean_cov(set_a)?;
    let (mb, mut cb) = mean_cov(set_b)?;
    let d = ma.len();
    if mb.len() != d {
        return Err(Error::shape("fid", format!("widths {d} and {}", mb.len())));
    }
    if shrinkage <= 0.0 && (set_a.len() <= d || set_b.len() <= d) {
        return Err(Error::Matrix {
            property: "full rank",
            detail: format!("{} and {} samples for width {d} without shrinkage", set_a.len(), set_b.len()),
        });
    }
    for i in 0..d {
        ca[i * d + i] += shrinkage;
        cb[i * d + i] += shrinkage;
    }
    let sa = psd_sqrt_f64(&ca, d)?;
    let mut inner = matmul_sq(&matmul_sq(&sa, &cb, d), &sa, d);
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = s;
            inner[j * d + i] = s;
        }
    }
    let root = psd_sqrt_f64(&inner, d)?;
    let mean_term: f64 = ma.iter().zip(&mb).map(|(a, b)| (a - b).powi(2)).sum();
    let trace: f64 = (0..d).map(|i| ca[i * d + i] + cb[i * d + i] - 2.0 * root[i * d + i]).sum();
    let v = mean_term + trace;
    if v < 0.0 {
        if v >= -1e-6 {
            return Ok(0.0);
        }
        return Err(Error::NonFinite(format!("Fréchet distance {v} is negative")));
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Attribute-embedder condition/generation cosine.
    pub consistency_a: f64,
    /// Projection-embedder condition/generation cosine.
    pub consistency_b: f64,
    pub text_fidelity: f64,
    pub fid: f64,
    pub samples: usize,
    pub config_hash: String,
}

/// One generated shot keyed by pair id.
#[derive(Clone, Debug)]
pub struct GeneratedItem {
    pub id: u64,
    pub image: Tensor,
}

/// Ground truth for one pair.
#[derive(Clone, Debug)]
pub struct ReferenceItem {
    pub id: u64,
    pub cond: Tensor,
    pub tgt: Tensor,
    pub prompt: IndividualPrompt,
}

/// Scores generations against references matched by id. Input order does
/// not matter; an id present on one side only is an error.
pub fn evaluate(generated: &[GeneratedItem], references: &[ReferenceItem], config_hash: &str) -> Result<EvalReport> {
    let gen: BTreeMap<u64, &GeneratedItem> = generated.iter().map(|g| (g.id, g)).collect();
    let refs: BTreeMap<u64, &ReferenceItem> = references.iter().map(|r| (r.id, r)).collect();
    let missing: Vec<String> = refs
        .keys()
        .filter(|id| !gen.contains_key(id))
        .chain(gen.keys().filter(|id| !refs.contains_key(id)))
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Missing(format!("pairs without a match: {}", missing.join(", "))));
    }
    let conds: Vec<Tensor> = refs.values().map(|r| r.cond.clone()).collect();
    let tgts: Vec<Tensor> = refs.values().map(|r| r.tgt.clone()).collect();
    let gens: Vec<Tensor> = gen.values().map(|g| g.image.clone()).collect();
    let prompts: Vec<IndividualPrompt> = refs.values().map(|r| r.prompt).collect();
    let oracle = OracleEmbedder::default();
    let proj = ProjectionEmbedder::default();
    let embed_all = |imgs: &[Tensor]| imgs.iter().map(|i| proj.embed(i)).collect::<Result<Vec<_>>>();
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        consistency_a: consistency(&oracle, &conds, &gens)?,
        consistency_b: consistency(&proj, &conds, &gens)?,
        text_fidelity: text_fidelity(&oracle, &PromptOracleEmbedder, &gens, &prompts)?,
        fid: fid(&embed_all(&gens)?, &embed_all(&tgts)?)?,
        samples: gens.len(),
        config_hash: config_hash.to_string(),
    })
}

/// Side-by-side table of two reports with per-metric deltas
/// (`candidate − baseline`).
pub fn format_comparison(
    baseline_name: &str,
    baseline: &EvalReport,
    candidate_name: &str,
    candidate: &EvalReport,
) -> String {
    let rows = [
        ("consistency_a", baseline.consistency_a, candidate.consistency_a, true),
        ("consistency_b", baseline.consistency_b, candidate.consistency_b, true),
        ("text_fidelity", baseline.text_fidelity, candidate.text_fidelity, true),
        ("fid", baseline.fid, candidate.fid, false),
    ];
    let w = baseline_name.len().max(candidate_name.len()).max(10);
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:>w$} {:>w$} {:>10}  better", "metric", baseline_name, candidate_name, "delta");
    for (name, b, c, higher) in rows {
        let delta = c - b;
        let better = if delta == 0.0 {
            "tie"
        } else if (delta > 0.0) == higher {
            candidate_name
        } else {
            baseline_name
        };
        let _ = writeln!(s, "{name:<14} {b:>w$.4} {c:>w$.4} {delta:>+10.4}  {better}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn table_fixture_formats() {
        let report = |a, b, c, f| EvalReport {
            schema_version: 1,
            consistency_a: a,
            consistency_b: b,
            text_fidelity: c,
            fid: f,
            samples: 0,
            config_hash: String::new(),
        };
        let baseline = report(0.4669, 0.7152, 0.2805, 80.43);
        let ours = report(0.4952, 0.7298, 0.2979, 59.37);
        let text = format_comparison("baseline", &baseline, "ours", &ours);
        assert!(text.contains("+0.0283"), "{text}");
        assert!(text.contains("-21.0600"), "{text}");
        assert_eq!(text.lines().filter(|l| l.ends_with("ours")).count(), 4);
    }

    #[test]
    fn fid_rejects_rank_deficiency_without_shrinkage() {
        let a: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64, 1.0, 0.0, 2.0]).collect();
        assert!(fid_with_shrinkage(&a, &a, 0.0).is_err());
        assert!(fid(&a, &a).unwrap() <= 1e-6);
    }
}
