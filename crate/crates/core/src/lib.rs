//! Next-shot generation conditioning stack.
//!
//! Given a condition shot and a hierarchy of prompts (one relational prompt
//! describing the cut, one individual prompt per shot), a small diffusion
//! transformer synthesizes the following shot. The crate covers:
//!
//! - [`tensor`]: dense `f32` tensors, masked attention, modulated layer norm,
//!   PSD square roots, seeded RNG streams and finite-difference gradients.
//! - [`layout`]: the five-segment token sequence and segment arithmetic.
//! - [`ham`]: the fixed block attention mask between segments.
//! - [`caci`]: per-segment timestep and pooled-context routing into AdaLN-Zero.
//! - [`model`]: LoRA-adapted transformer blocks with analytic gradients.
//! - [`diffusion`]: rectified-flow noising, target-masked loss, two-stage
//!   training and the clean-condition sampler.
//! - [`world`]: a procedural scene generator producing shot pairs for the five
//!   edit patterns, with hierarchical prompt codes.
//! - [`curation`]: shot detection, keyframe selection, filtering and pairing.
//! - [`metrics`]: cosine consistency, text fidelity and Fréchet distance.
//! - [`cli`]: the `nextshot` command line.

pub mod caci;
pub mod cli;
pub mod curation;
pub mod diffusion;
pub mod error;
pub mod ham;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
