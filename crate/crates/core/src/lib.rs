//! Adversarial-input triage and repair for vision-language pipelines.
//!
//! The crate sorts incoming frames into clean, globally perturbed, or
//! patch-attacked using block-wise reconstruction-error statistics, masks
//! detected patches with flat gray, and counters global perturbations by
//! optimizing a text embedding in a frozen dual encoder's latent space and
//! projecting it onto vocabulary tokens that are appended to the prompt.
//!
//! Large pretrained models are abstracted behind traits ([`Reconstructor`],
//! [`DualEncoder`]) with small deterministic implementations shipped here.

pub mod config;
pub mod embedspace;
pub mod error;
pub mod errormap;
pub mod harness;
pub mod image;
pub mod pipeline;
pub mod prompt_tuning;
pub mod purifier;
pub mod sentinel;

pub use embedspace::{DualEncoder, EmbeddingVector, Projector, ToyDualEncoder, Vocabulary};
pub use error::{Error, Result};
pub use errormap::{BlockGrid, ErrorMap, Reconstructor, ReferenceReconstructor};
pub use image::Image;
pub use pipeline::{defend, DefenseOutcome, PipelineConfig};
pub use sentinel::{DetectionMetrics, GateThresholds, ThreatClass, Verdict};
