//! Seeded shot-pair generation, on-disk manifests and curation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::prompt::{HierarchicalPrompt, PromptCodes};
use super::scene::{
    apply_edit, render_scene, Camera, EditPattern, Scene, Shape, Subject, LIGHTING_LEVELS, NUM_ANGLES, NUM_COLORS,
    NUM_PALETTES,
};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

const HELDOUT_BIT: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    /// Pair seeds of the two splits live in disjoint halves of `u64`.
    pub fn pair_seed(self, base: u64, index: u64) -> u64 {
        let raw = Rng::new(base).substream_indexed("pair", index).seed();
        match self {
            Split::Train => raw & !HELDOUT_BIT,
            Split::Heldout => raw | HELDOUT_BIT,
        }
    }

    pub fn of_seed(seed: u64) -> Split {
        if seed & HELDOUT_BIT == 0 {
            Split::Train
        } else {
            Split::Heldout
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShotPair {
    pub id: u64,
    pub seed: u64,
    pub pattern: EditPattern,
    pub scene: Scene,
    pub tgt_scene: Scene,
    pub cond: Tensor,
    pub tgt: Tensor,
    pub prompt: HierarchicalPrompt,
    pub curated: bool,
}

fn sample_subject(rng: &mut Rng, left: bool) -> Subject {
    let x = if left { rng.uniform_range(0.3, 0.45) } else { rng.uniform_range(0.55, 0.7) };
    Subject {
        shape: Shape::ALL[rng.below(3)],
        color: rng.below(NUM_COLORS) as u8,
        x,
        y: rng.uniform_range(0.35, 0.65),
        size: rng.below(3) as u8,
    }
}

/// Draws a condition scene that satisfies `pattern`'s precondition.
pub fn sample_scene(rng: &mut Rng, pattern: EditPattern) -> Scene {
    let left = rng.bernoulli(0.5);
    let primary = sample_subject(rng, left);
    let with_secondary = pattern == EditPattern::ShotReverseShot || rng.bernoulli(0.5);
    let secondary = with_secondary.then(|| {
        let color = ((primary.color as usize + 1 + rng.below(NUM_COLORS - 1)) % NUM_COLORS) as u8;
        Subject {
            shape: Shape::ALL[rng.below(3)],
            color,
            x: (1.0 - primary.x + rng.uniform_range(-0.05, 0.05)).clamp(0.25, 0.75),
            y: rng.uniform_range(0.3, 0.7),
            size: rng.below(2) as u8,
        }
    });
    let palette = rng.below(NUM_PALETTES) as u8;
    let lighting = LIGHTING_LEVELS[rng.below(LIGHTING_LEVELS.len())];
    let angle = rng.below(NUM_ANGLES) as u8;
    let flip = rng.bernoulli(0.5);
    let zoom = if rng.bernoulli(0.75) { 1.0 } else { 2.0 };
    let (cx, cy) = if zoom == 1.0 { (0.5, 0.5) } else { (primary.x.clamp(0.25, 0.75), primary.y.clamp(0.25, 0.75)) };
    Scene { primary, secondary, palette, lighting, camera: Camera { zoom, cx, cy, flip, angle } }
}

/// Generates one pair; identical inputs give identical pairs.
pub fn make_pair(seed: u64, pattern: EditPattern, image_size: usize) -> Result<ShotPair> {
    let mut rng = Rng::new(seed).substream("scene");
    let scene = sample_scene(&mut rng, pattern);
    let tgt_scene = apply_edit(&scene, pattern)?;
    Ok(ShotPair {
        id: 0,
        seed,
        pattern,
        cond: render_scene(&scene, image_size),
        tgt: render_scene(&tgt_scene, image_size),
        prompt: HierarchicalPrompt::describe(&scene, &tgt_scene, pattern)?,
        scene,
        tgt_scene,
        curated: false,
    })
}

/// Relative frequency of each edit pattern.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternMix(pub [f64; 5]);

impl PatternMix {
    pub fn uniform() -> Self {
        PatternMix([0.2; 5])
    }

    pub fn only(pattern: EditPattern) -> Self {
        let mut w = [0.0; 5];
        w[pattern_index(pattern)] = 1.0;
        PatternMix(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("pattern weights must be finite and nonnegative"));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("pattern weights sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Largest-remainder allocation of `n` pairs.
    pub fn counts(&self, n: usize) -> [usize; 5] {
        let exact: Vec<f64> = self.0.iter().map(|w| w * n as f64).collect();
        let mut counts = [0usize; 5];
        for (c, e) in counts.iter_mut().zip(&exact) {
            *c = e.floor() as usize;
        }
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let missing = n - counts.iter().sum::<usize>();
        for &i in order.iter().filter(|&&i| self.0[i] > 0.0).cycle().take(missing) {
            counts[i] += 1;
        }
        counts
    }

    /// Parses `uniform`, a single pattern name, or `name=weight,...`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(Self::uniform());
        }
        if !s.contains('=') {
            return Ok(Self::only(s.parse()?));
        }
        let mut w = [0.0; 5];
        for part in s.split(',') {
            let (name, value) =
                part.split_once('=').ok_or_else(|| Error::invalid(format!("malformed mix entry {part:?}")))?;
            let pattern: EditPattern = name.trim().parse()?;
            w[pattern_index(pattern)] =
                value.trim().parse().map_err(|_| Error::invalid(format!("bad weight {value:?}")))?;
        }
        let mix = PatternMix(w);
        mix.validate()?;
        Ok(mix)
    }
}

pub fn pattern_index(p: EditPattern) -> usize {
    EditPattern::ALL.iter().position(|&q| q == p).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub seed: u64,
    pub split: Split,
    pub image_size: usize,
    pub n: usize,
    pub pattern_counts: BTreeMap<String, usize>,
    pub curated: usize,
}

/// Generates `n` pairs; the pattern order is a seeded shuffle of the mix
/// allocation.
pub fn generate_dataset(
    n: usize,
    mix: &PatternMix,
    seed: u64,
    split: Split,
    image_size: usize,
) -> Result<Vec<ShotPair>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    mix.validate()?;
    let counts = mix.counts(n);
    let mut patterns: Vec<EditPattern> =
        EditPattern::ALL.iter().zip(counts).flat_map(|(&p, c)| std::iter::repeat_n(p, c)).collect();
    let label = match split {
        Split::Train => "patterns.train",
        Split::Heldout => "patterns.heldout",
    };
    Rng::new(seed).substream(label).shuffle(&mut patterns);
    patterns
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut pair = make_pair(split.pair_seed(seed, i as u64), p, image_size)?;
            pair.id = i as u64;
            Ok(pair)
        })
        .collect()
}

pub fn summarize(pairs: &[ShotPair], seed: u64, split: Split, image_size: usize) -> DatasetSummary {
    let mut pattern_counts: BTreeMap<String, usize> = EditPattern::ALL.iter().map(|p| (p.to_string(), 0)).collect();
    for p in pairs {
        *pattern_counts.entry(p.pattern.to_string()).or_default() += 1;
    }
    DatasetSummary {
        seed,
        split,
        image_size,
        n: pairs.len(),
        pattern_counts,
        curated: pairs.iter().filter(|p| p.curated).count(),
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub seed: u64,
    pub split: Split,
    pub pattern: EditPattern,
    pub scene: Scene,
    pub tgt_scene: Scene,
    pub prompt: HierarchicalPrompt,
    pub codes: PromptCodes,
    pub curated: bool,
    pub cond_path: PathBuf,
    pub tgt_path: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes image tensors, the JSON-lines manifest and a summary under `dir`.
pub fn write_dataset(dir: &Path, pairs: &[ShotPair], summary: &DatasetSummary) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut out = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    for p in pairs {
        let cond_path = PathBuf::from("images").join(format!("{:06}_cond.nst", p.id));
        let tgt_path = PathBuf::from("images").join(format!("{:06}_tgt.nst", p.id));
        p.cond.save(dir.join(&cond_path))?;
        p.tgt.save(dir.join(&tgt_path))?;
        let entry = ManifestEntry {
            id: p.id,
            seed: p.seed,
            split: Split::of_seed(p.seed),
            pattern: p.pattern,
            scene: p.scene,
            tgt_scene: p.tgt_scene,
            prompt: p.prompt,
            codes: p.prompt.codes()?,
            curated: p.curated,
            cond_path,
            tgt_path,
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::Format { path: path.clone(), detail: e.to_string() })?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| Error::Format { path: path.clone(), detail: format!("line {}: {e}", i + 1) })?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn read_summary(dir: &Path) -> Result<DatasetSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Format { path: path.clone(), detail: e.to_string() })?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every pair listed in the manifest under `dir`.
pub fn load_dataset(dir: &Path) -> Result<Vec<ShotPair>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            Ok(ShotPair {
                id: e.id,
                seed: e.seed,
                pattern: e.pattern,
                scene: e.scene,
                tgt_scene: e.tgt_scene,
                cond: Tensor::load(dir.join(&e.cond_path))?,
                tgt: Tensor::load(dir.join(&e.tgt_path))?,
                prompt: e.prompt,
                curated: e.curated,
            })
        })
        .collect()
}

/// Deterministic stand-in for manual curation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationCriteria {
    /// Keep pairs whose lighting is strictly above this level.
    pub min_lighting: Option<f32>,
    pub require_secondary: bool,
    /// Trim every surviving pattern to the smallest non-zero surviving
    /// pattern count.
    pub balance_patterns: bool,
}

impl CurationCriteria {
    pub fn accept_all() -> Self {
        Self::default()
    }

    /// Bright, pattern-balanced subset used by two-stage training.
    pub fn standard() -> Self {
        CurationCriteria { min_lighting: Some(0.5), require_secondary: false, balance_patterns: true }
    }

    fn admits(&self, scene: &Scene) -> bool {
        self.min_lighting.is_none_or(|l| scene.lighting > l) && (!self.require_secondary || scene.secondary.is_some())
    }
}

/// Sets `curated` on the pairs meeting `criteria`; returns their count.
pub fn curate(pairs: &mut [ShotPair], criteria: &CurationCriteria) -> Result<usize> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot curate an empty manifest"));
    }
    let mut keep: Vec<bool> = pairs.iter().map(|p| criteria.admits(&p.scene)).collect();
    if criteria.balance_patterns {
        let mut per = [0usize; 5];
        for (p, &k) in pairs.iter().zip(&keep) {
            per[pattern_index(p.pattern)] += k as usize;
        }
        let quota = per.iter().copied().filter(|&c| c > 0).min().unwrap_or(0);
        let mut taken = [0usize; 5];
        for (p, k) in pairs.iter().zip(keep.iter_mut()) {
            let i = pattern_index(p.pattern);
            if *k {
                *k = taken[i] < quota;
                taken[i] += *k as usize;
            }
        }
    }
    for (p, k) in pairs.iter_mut().zip(&keep) {
        p.curated = *k;
    }
    let n = keep.iter().filter(|&&k| k).count();
    if n == 0 {
        log::warn!("curation criteria rejected every pair");
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_pair() {
        for p in EditPattern::ALL {
            assert_eq!(make_pair(9, p, 16).unwrap(), make_pair(9, p, 16).unwrap());
        }
    }

    #[test]
    fn single_pattern_mix() {
        let pairs = generate_dataset(100, &PatternMix::only(EditPattern::CutIn), 3, Split::Train, 16).unwrap();
        assert_eq!(pairs.len(), 100);
        assert!(pairs.iter().all(|p| p.pattern == EditPattern::CutIn));
    }

    #[test]
    fn counts_follow_mix() {
        assert_eq!(PatternMix::uniform().counts(12), [3, 3, 2, 2, 2]);
        let pairs = generate_dataset(23, &PatternMix::uniform(), 1, Split::Train, 8).unwrap();
        let s = summarize(&pairs, 1, Split::Train, 8);
        assert_eq!(s.pattern_counts.values().sum::<usize>(), 23);
        assert!(s.pattern_counts.values().all(|&c| c == 4 || c == 5));
    }

    #[test]
    fn bad_mix_rejected() {
        assert!(PatternMix([0.5, 0.1, 0.0, 0.0, 0.0]).validate().is_err());
        assert!(generate_dataset(0, &PatternMix::uniform(), 0, Split::Train, 8).is_err());
        assert!(PatternMix::parse("cut-in=0.5,cut-out=0.5").is_ok());
        assert!(PatternMix::parse("zoom=1").is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        for i in 0..50 {
            assert_eq!(Split::of_seed(Split::Train.pair_seed(5, i)), Split::Train);
            assert_eq!(Split::of_seed(Split::Heldout.pair_seed(5, i)), Split::Heldout);
        }
    }

    #[test]
    fn curation_rules() {
        let mut pairs = generate_dataset(60, &PatternMix::uniform(), 2, Split::Train, 8).unwrap();
        assert_eq!(curate(&mut pairs, &CurationCriteria::accept_all()).unwrap(), 60);
        let bright = CurationCriteria { min_lighting: Some(0.5), ..Default::default() };
        curate(&mut pairs, &bright).unwrap();
        assert!(pairs.iter().filter(|p| p.curated).all(|p| p.scene.lighting > 0.5));
        curate(&mut pairs, &CurationCriteria::standard()).unwrap();
        let s = summarize(&pairs, 2, Split::Train, 8);
        let mut per = [0usize; 5];
        for p in pairs.iter().filter(|p| p.curated) {
            per[pattern_index(p.pattern)] += 1;
        }
        assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        assert_eq!(s.curated, per.iter().sum::<usize>());
        assert!(curate(&mut [], &CurationCriteria::accept_all()).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = generate_dataset(7, &PatternMix::uniform(), 4, Split::Heldout, 8).unwrap();
        write_dataset(dir.path(), &pairs, &summarize(&pairs, 4, Split::Heldout, 8)).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), pairs);
        let entries = read_manifest(dir.path()).unwrap();
        assert!(entries.iter().all(|e| e.split == Split::Heldout));
        assert_eq!(read_summary(dir.path()).unwrap().n, 7);
    }
}
