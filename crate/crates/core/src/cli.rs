//! The `nextshot` command line.
//!
//! Every subcommand writes `run_config.json` into its `--out` directory
//! before doing any work. The file records the fully resolved configuration
//! and its SHA-256 hash. The hash leaves out the output directory, so the
//! same run written to two places carries the same hash.
//!
//! | subcommand      | reads                         | writes                                         |
//! |-----------------|-------------------------------|------------------------------------------------|
//! | `gen-data`      | nothing                       | `manifest.jsonl`, `summary.json`, `images/`    |
//! | `train`         | a dataset directory           | `checkpoint.nsck`, `losses.csv`, `probes.jsonl`|
//! | `sample`        | checkpoint, dataset directory | `manifest.jsonl`, `images/`                    |
//! | `eval`          | sample and dataset directories| `report.json`                                  |
//! | `compare`       | two reports                   | stdout only                                    |
//! | `inspect-mask`  | nothing                       | `block_matrix.txt`, `mask.pgm`                 |
//! | `gen-stream`    | nothing                       | `stream.nst`, `planted_cuts.json`              |
//! | `curate-stream` | a frame-stream tensor         | `manifest.jsonl`, `keyframes.json`, `images/`  |
//!
//! `--config <json>` overlays a partial [`RunConfig`] onto the defaults; the
//! explicit flags then override the file. Exit codes: 0 on success, 1 for
//! usage errors, 2 for runtime failures.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::caci::{caci_plan, ConditioningMode};
use crate::curation::{
    run_pipeline, synthetic_stream, FrameStream, KeyframeRecord, PipelineConfig, ScorerSet, ShotSpan,
};
use crate::diffusion::{sample_next_shot, train_two_stage, write_loss_csv, StageMode, TrainConfig};
use crate::error::Error;
use crate::ham::{build_ham, format_block_matrix, mask_to_pgm};
use crate::layout::{build_layout, SegmentLayout};
use crate::metrics::{evaluate, format_comparison, EvalReport, GeneratedItem, ReferenceItem};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelWeights};
use crate::tensor::{Rng, Tensor};
use crate::world::{
    curate, generate_dataset, load_dataset, read_manifest, summarize, write_dataset, CurationCriteria, PatternMix,
    Split,
};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.nsck";
pub const LOSS_FILE: &str = "losses.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutMode {
    /// Relational prompt, both individual prompts, both shots.
    Full,
    /// Drops the relational prompt segment.
    NoRel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Heldout,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Heldout => Split::Heldout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub n: usize,
    pub mix: String,
    pub split: SplitArg,
    /// Apply the standard curation criteria and flag the survivors.
    pub curate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSettings {
    pub shots: usize,
    pub frames_per_shot: usize,
    pub drift: f32,
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub conditioning: ConditioningMode,
    pub layout: LayoutMode,
    pub data: DataSettings,
    pub stream: StreamSettings,
    pub curation: PipelineConfig,
    pub sample_steps: usize,
    /// Explicit segment lengths for `inspect-mask`.
    pub mask_lengths: Option<[usize; 5]>,
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn defaults(subcommand: &str) -> Self {
        RunConfig {
            subcommand: subcommand.to_string(),
            seed: 0,
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            conditioning: ConditioningMode::Caci,
            layout: LayoutMode::Full,
            data: DataSettings { n: 64, mix: "uniform".into(), split: SplitArg::Train, curate: false },
            stream: StreamSettings { shots: 6, frames_per_shot: 8, drift: 0.01 },
            curation: PipelineConfig::default(),
            sample_steps: 50,
            mask_lengths: None,
            inputs: Vec::new(),
            out: PathBuf::new(),
        }
    }

    /// SHA-256 of the configuration with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("run config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn write(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(Error::from)?;
        let doc = serde_json::json!({ "hash": self.hash(), "config": self });
        let text = serde_json::to_string_pretty(&doc).map_err(Error::from)?;
        fs::write(self.out.join(RUN_CONFIG_FILE), text + "\n").map_err(Error::from)?;
        Ok(())
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

#[derive(Parser, Debug)]
#[command(name = "nextshot", version, about = "Next-shot generation experiments on procedural shot pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Root seed; every random draw of the run derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with a partial run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a procedural shot-pair dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        /// `uniform`, a single pattern name, or `name=weight,...`.
        #[arg(long)]
        mix: Option<String>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        image_size: Option<usize>,
        /// Flag pairs passing the standard curation criteria.
        #[arg(long)]
        curate: bool,
    },
    /// Train LoRA and modulation weights on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Separate curated dataset; defaults to the curated pairs of `--data`.
        #[arg(long)]
        curated: Option<PathBuf>,
        #[arg(long)]
        conditioning: Option<ConditioningMode>,
        #[arg(long, value_enum)]
        layout: Option<LayoutMode>,
        #[arg(long)]
        stage: Option<StageMode>,
        /// Broad-stage optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        curated_steps: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Record modulation hashes of every drawn noise level.
        #[arg(long)]
        probe: bool,
    },
    /// Generate the next shot for every pair of a dataset.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        conditioning: Option<ConditioningMode>,
        /// Euler steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score samples against their ground-truth dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output directory of `sample`.
        #[arg(long)]
        gen: PathBuf,
        /// Dataset directory holding the ground truth.
        #[arg(long)]
        gt: PathBuf,
        /// Report to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Print two reports side by side with deltas.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        #[arg(long, default_value = "baseline")]
        baseline_name: String,
        #[arg(long, default_value = "candidate")]
        candidate_name: String,
    },
    /// Print the segment attention matrix and render the token mask.
    InspectMask {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        layout: Option<LayoutMode>,
        /// Segment lengths `rel,ind_cond,ind_tgt,vis_cond,vis_tgt`; `rel` is
        /// ignored for the no-rel layout.
        #[arg(long)]
        lengths: Option<String>,
    },
    /// Render a synthetic frame stream with planted cuts.
    GenStream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        frames_per_shot: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Detect shots in a frame stream and emit keyframe pairs.
    CurateStream {
        #[command(flatten)]
        common: Common,
        /// Stacked `frames × h × w × 3` tensor file.
        #[arg(long)]
        stream: PathBuf,
    },
}

/// Recursively overlays `patch` onto `base`. Keys absent from `base` are
/// rejected so typos surface as usage errors.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(usage(format!("unknown config key `{here}`"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

fn resolve(subcommand: &str, common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::defaults(subcommand);
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let mut base = serde_json::to_value(&cfg).map_err(Error::from)?;
        merge(&mut base, &patch, "")?;
        cfg = serde_json::from_value(base).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        cfg.subcommand = subcommand.to_string();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.out = common.out.clone();
    Ok(cfg)
}

fn finish_model(cfg: &mut RunConfig) -> Result<(), CliError> {
    cfg.model.use_rel = cfg.layout == LayoutMode::Full;
    cfg.model.validate().map_err(|e| usage(e.to_string()))
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { common, n, mix, split, image_size, curate } => {
            let mut cfg = resolve("gen-data", &common)?;
            if let Some(n) = n {
                cfg.data.n = n;
            }
            if let Some(m) = mix {
                cfg.data.mix = m;
            }
            if let Some(s) = split {
                cfg.data.split = s;
            }
            if let Some(s) = image_size {
                cfg.model.image_size = s;
            }
            cfg.data.curate |= curate;
            gen_data(&cfg)
        }
        Command::Train {
            common,
            data,
            curated,
            conditioning,
            layout,
            stage,
            steps,
            curated_steps,
            lr,
            batch_size,
            probe,
        } => {
            let mut cfg = resolve("train", &common)?;
            cfg.inputs = std::iter::once(data).chain(curated).collect();
            if let Some(c) = conditioning {
                cfg.conditioning = c;
            }
            if let Some(l) = layout {
                cfg.layout = l;
            }
            if let Some(s) = stage {
                cfg.train.stage = s;
            }
            if steps.is_some() {
                cfg.train.raw_steps = steps;
            }
            if let Some(s) = curated_steps {
                cfg.train.curated_steps = s;
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            cfg.train.probe_modulation |= probe;
            cfg.train.conditioning = cfg.conditioning;
            cfg.train.seed = cfg.seed;
            finish_model(&mut cfg)?;
            cfg.train.validate().map_err(|e| usage(e.to_string()))?;
            train(&cfg)
        }
        Command::Sample { common, checkpoint, data, conditioning, steps } => {
            let mut cfg = resolve("sample", &common)?;
            cfg.inputs = vec![checkpoint, data];
            if let Some(c) = conditioning {
                cfg.conditioning = c;
            }
            if let Some(s) = steps {
                cfg.sample_steps = s;
            }
            if cfg.sample_steps == 0 {
                return Err(usage("--steps must be at least 1"));
            }
            sample(&cfg)
        }
        Command::Eval { common, gen, gt, baseline } => {
            let mut cfg = resolve("eval", &common)?;
            cfg.inputs = vec![gen, gt];
            eval(&cfg, baseline.as_deref())
        }
        Command::Compare { baseline, candidate, baseline_name, candidate_name } => {
            let b = read_report(&baseline)?;
            let c = read_report(&candidate)?;
            print!("{}", format_comparison(&baseline_name, &b, &candidate_name, &c));
            Ok(())
        }
        Command::InspectMask { common, layout, lengths } => {
            let mut cfg = resolve("inspect-mask", &common)?;
            if let Some(l) = layout {
                cfg.layout = l;
            }
            if let Some(spec) = lengths {
                let v: Vec<usize> = spec
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| usage(format!("--lengths {spec:?}: {e}")))?;
                let [rel, ic, it, vc, vt] = v[..] else {
                    return Err(usage(format!("--lengths needs five comma-separated values, got {}", v.len())));
                };
                cfg.mask_lengths = Some([rel, ic, it, vc, vt]);
            }
            inspect_mask(&cfg)
        }
        Command::GenStream { common, shots, frames_per_shot, image_size } => {
            let mut cfg = resolve("gen-stream", &common)?;
            if let Some(s) = shots {
                cfg.stream.shots = s;
            }
            if let Some(f) = frames_per_shot {
                cfg.stream.frames_per_shot = f;
            }
            if let Some(s) = image_size {
                cfg.model.image_size = s;
            }
            gen_stream(&cfg)
        }
        Command::CurateStream { common, stream } => {
            let mut cfg = resolve("curate-stream", &common)?;
            cfg.inputs = vec![stream];
            curate_stream(&cfg)
        }
    }
}

fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let mix = PatternMix::parse(&cfg.data.mix).map_err(|e| usage(e.to_string()))?;
    if cfg.data.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    cfg.write()?;
    let split: Split = cfg.data.split.into();
    let mut pairs = generate_dataset(cfg.data.n, &mix, cfg.seed, split, cfg.model.image_size)?;
    if cfg.data.curate {
        let kept = curate(&mut pairs, &CurationCriteria::standard())?;
        info!("{kept} of {} pairs flagged as curated", pairs.len());
    }
    let summary = summarize(&pairs, cfg.seed, split, cfg.model.image_size);
    write_dataset(&cfg.out, &pairs, &summary)?;
    info!("wrote {} pairs to {}", pairs.len(), cfg.out.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.write()?;
    let raw = load_dataset(&cfg.inputs[0])?;
    let curated = match cfg.inputs.get(1) {
        Some(dir) => load_dataset(dir)?,
        None => raw.iter().filter(|p| p.curated).cloned().collect(),
    };
    if let Some(p) = raw.iter().chain(&curated).find(|p| Split::of_seed(p.seed) == Split::Heldout) {
        return Err(
            Error::invalid(format!("pair {} belongs to the held-out split and cannot be trained on", p.id)).into()
        );
    }
    let init = ModelWeights::init(&cfg.model, cfg.seed)?;
    let outcome = train_two_stage(init, &raw, &curated, &cfg.train)?;
    save_checkpoint(cfg.out.join(CHECKPOINT_FILE), &outcome.weights)?;
    write_loss_csv(&cfg.out.join(LOSS_FILE), &outcome.losses)?;
    if cfg.train.probe_modulation {
        let mut w = BufWriter::new(fs::File::create(cfg.out.join("probes.jsonl")).map_err(Error::from)?);
        for p in &outcome.probes {
            serde_json::to_writer(&mut w, p).map_err(Error::from)?;
            w.write_all(b"\n").map_err(Error::from)?;
        }
        w.flush().map_err(Error::from)?;
    }
    if let Some(last) = outcome.losses.last() {
        info!("{} steps, final loss {:.5}", last.step, last.loss);
    }
    Ok(())
}

/// One line of a sample run's `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: u64,
    pub cond_path: PathBuf,
    pub gen_path: Option<PathBuf>,
    pub error: Option<String>,
}

/// Binary PPM of an `h × w × 3` image in `[0, 1]`.
pub fn image_to_ppm(image: &Tensor) -> crate::Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("image_to_ppm", format!("expected h×w×3, got {s:?}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

fn sample(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.write()?;
    let weights = load_checkpoint(&cfg.inputs[0])?;
    let data_dir = &cfg.inputs[1];
    let entries = read_manifest(data_dir)?;
    let pairs = load_dataset(data_dir)?;
    let plan = caci_plan(cfg.conditioning);
    let images = cfg.out.join("images");
    fs::create_dir_all(&images).map_err(Error::from)?;
    let root = Rng::new(cfg.seed);
    let mut out = BufWriter::new(fs::File::create(cfg.out.join("manifest.jsonl")).map_err(Error::from)?);
    let mut failures = 0;
    for (entry, pair) in entries.iter().zip(&pairs) {
        let cond_path = PathBuf::from("images").join(format!("{:06}_cond.nst", pair.id));
        fs::copy(data_dir.join(&entry.cond_path), cfg.out.join(&cond_path)).map_err(Error::from)?;
        let mut rng = root.substream_indexed("sample", pair.id);
        let line = match sample_next_shot(&weights, &pair.cond, &pair.prompt, cfg.sample_steps, &plan, &mut rng) {
            Ok(img) => {
                let gen_path = PathBuf::from("images").join(format!("{:06}_gen.nst", pair.id));
                img.save(cfg.out.join(&gen_path))?;
                fs::write(images.join(format!("{:06}_gen.ppm", pair.id)), image_to_ppm(&img)?).map_err(Error::from)?;
                SampleEntry { id: pair.id, cond_path, gen_path: Some(gen_path), error: None }
            }
            Err(e) => {
                warn!("pair {}: {e}", pair.id);
                failures += 1;
                SampleEntry { id: pair.id, cond_path, gen_path: None, error: Some(e.to_string()) }
            }
        };
        serde_json::to_writer(&mut out, &line).map_err(Error::from)?;
        out.write_all(b"\n").map_err(Error::from)?;
    }
    out.flush().map_err(Error::from)?;
    info!("sampled {} pairs, {failures} failed", pairs.len());
    Ok(())
}

pub fn read_sample_manifest(dir: &Path) -> crate::Result<Vec<SampleEntry>> {
    let path = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::Format { path: path.clone(), detail: e.to_string() })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format { path: path.clone(), detail: format!("line {}: {e}", i + 1) })
        })
        .collect()
}

fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn eval(cfg: &RunConfig, baseline: Option<&Path>) -> Result<(), CliError> {
    let base = baseline.map(read_report).transpose()?;
    cfg.write()?;
    let (gen_dir, gt_dir) = (&cfg.inputs[0], &cfg.inputs[1]);
    let generated = read_sample_manifest(gen_dir)?
        .into_iter()
        .filter_map(|e| e.gen_path.map(|p| (e.id, p)))
        .map(|(id, p)| Ok(GeneratedItem { id, image: Tensor::load(gen_dir.join(p))? }))
        .collect::<crate::Result<Vec<_>>>()?;
    let references: Vec<ReferenceItem> = load_dataset(gt_dir)?
        .into_iter()
        .map(|p| ReferenceItem { id: p.id, cond: p.cond, tgt: p.tgt, prompt: p.prompt.tgt })
        .collect();
    let report = evaluate(&generated, &references, &cfg.hash())?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    fs::write(cfg.out.join(REPORT_FILE), text.clone() + "\n").map_err(Error::from)?;
    println!("{text}");
    if let Some(b) = base {
        print!("{}", format_comparison("baseline", &b, "this run", &report));
    }
    Ok(())
}

fn inspect_mask(cfg: &RunConfig) -> Result<(), CliError> {
    let layout = match cfg.mask_lengths {
        Some([rel, ic, it, vc, vt]) => match cfg.layout {
            LayoutMode::Full => build_layout(rel, ic, it, vc, vt),
            LayoutMode::NoRel => SegmentLayout::without_rel(ic, it, vc, vt),
        },
        None => {
            let mut m = cfg.model.clone();
            m.use_rel = cfg.layout == LayoutMode::Full;
            m.layout()
        }
    }
    .map_err(|e| usage(e.to_string()))?;
    cfg.write()?;
    let text = format_block_matrix(&layout);
    print!("{text}");
    fs::write(cfg.out.join("block_matrix.txt"), &text).map_err(Error::from)?;
    let mask = build_ham(&layout);
    fs::write(cfg.out.join("mask.pgm"), mask_to_pgm(&mask)).map_err(Error::from)?;
    Ok(())
}

fn gen_stream(cfg: &RunConfig) -> Result<(), CliError> {
    let s = &cfg.stream;
    if s.shots == 0 || s.frames_per_shot == 0 {
        return Err(usage("--shots and --frames-per-shot must be at least 1"));
    }
    cfg.write()?;
    let stream = synthetic_stream(cfg.seed, s.shots, s.frames_per_shot, cfg.model.image_size, s.drift)?;
    stream.save(&cfg.out.join("stream.nst"))?;
    let cuts = stream.planted_cuts.clone().unwrap_or_default();
    fs::write(cfg.out.join("planted_cuts.json"), serde_json::to_string(&cuts).map_err(Error::from)? + "\n")
        .map_err(Error::from)?;
    Ok(())
}

/// One keyframe pair emitted by `curate-stream`. Shares `id`, `cond_path`,
/// `tgt_path` and `curated` with the dataset manifest lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamPairEntry {
    pub id: u64,
    pub curated: bool,
    pub cond_path: PathBuf,
    pub tgt_path: PathBuf,
    pub cond: KeyframeRecord,
    pub tgt: KeyframeRecord,
}

#[derive(Serialize)]
struct KeyframeSummary<'a> {
    spans: &'a [ShotSpan],
    keyframes: &'a [KeyframeRecord],
    survivors: &'a [KeyframeRecord],
}

fn curate_stream(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.write()?;
    let stream = FrameStream::load(&cfg.inputs[0])?;
    let out = run_pipeline(&stream, &ScorerSet::synthetic(), &cfg.curation)?;
    let images = cfg.out.join("images");
    fs::create_dir_all(&images).map_err(Error::from)?;
    let mut w = BufWriter::new(fs::File::create(cfg.out.join("manifest.jsonl")).map_err(Error::from)?);
    for (i, (a, b)) in out.pairs.iter().enumerate() {
        let cond_path = PathBuf::from("images").join(format!("{i:06}_cond.nst"));
        let tgt_path = PathBuf::from("images").join(format!("{i:06}_tgt.nst"));
        stream.frame(a.frame).save(cfg.out.join(&cond_path))?;
        stream.frame(b.frame).save(cfg.out.join(&tgt_path))?;
        let entry = StreamPairEntry { id: i as u64, curated: true, cond_path, tgt_path, cond: *a, tgt: *b };
        serde_json::to_writer(&mut w, &entry).map_err(Error::from)?;
        w.write_all(b"\n").map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    let summary = KeyframeSummary { spans: &out.spans, keyframes: &out.keyframes, survivors: &out.survivors };
    fs::write(cfg.out.join("keyframes.json"), serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n")
        .map_err(Error::from)?;
    info!("{} shots, {} keyframes kept, {} pairs", out.spans.len(), out.survivors.len(), out.pairs.len());
    Ok(())
}
