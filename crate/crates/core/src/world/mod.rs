//! Procedural shot pairs covering five editing patterns, with discrete
//! hierarchical prompts derived from the scene records.

mod dataset;
mod prompt;
mod scene;

pub use dataset::{
    curate, generate_dataset, load_dataset, make_pair, pattern_index, read_manifest, read_summary, sample_scene,
    summarize, write_dataset, CurationCriteria, DatasetSummary, ManifestEntry, PatternMix, ShotPair, Split,
    MANIFEST_FILE, SUMMARY_FILE,
};
pub use prompt::{
    embed_codes, encode_prompt, prompt_codes, vocab_size, Field, HierarchicalPrompt, IndividualPrompt, PromptCodes,
    RelationalPrompt, DETAIL_SLOTS, IND_LEN, PAD, REL_LEN,
};
pub use scene::{
    apply_edit, quantize, render_scene, Camera, EditPattern, Scene, Shape, Subject, LIGHTING_LEVELS, NUM_ANGLES,
    NUM_COLORS, NUM_PALETTES, PALETTE_COLORS, SUBJECT_COLORS, SUBJECT_RADII, ZOOM_LEVELS,
};
