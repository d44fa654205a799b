//! Batch execution over labelled samples.

use rayon::prelude::*;

use crate::embedspace::{DualEncoder, Projector, Vocabulary};
use crate::error::Result;
use crate::image::Image;
use crate::pipeline::{defend, frame_error_maps, pooled_metrics, PipelineConfig};
use crate::sentinel::{dual_gate, ThreatClass, Verdict};

use super::fixtures::Fixture;
use super::manifest::ManifestEntry;
use super::report::ReportRow;

#[derive(Debug, Clone)]
pub struct RunSample {
    pub id: String,
    pub truth: Option<ThreatClass>,
    pub frames: Vec<Image>,
}

impl From<&Fixture> for RunSample {
    fn from(f: &Fixture) -> Self {
        Self {
            id: f.id.clone(),
            truth: Some(f.truth),
            frames: vec![f.image.clone()],
        }
    }
}

/// Loads every manifest image; the first failure aborts.
pub fn load_samples(entries: &[ManifestEntry]) -> Result<Vec<RunSample>> {
    entries
        .par_iter()
        .map(|e| {
            Ok(RunSample {
                id: e.id.clone(),
                truth: e.truth,
                frames: vec![Image::load(&e.path)?],
            })
        })
        .collect()
}

/// Detection only: reconstruct, score and gate, with no purification or
/// prompt tuning.
pub fn detect_frames(frames: &[Image], cfg: &PipelineConfig) -> Result<Verdict> {
    cfg.validate()?;
    let first = frames
        .first()
        .ok_or_else(|| crate::error::invalid("no frames"))?;
    let grid = cfg.grid_for(first)?;
    let maps = frame_error_maps(frames, &grid, &cfg.reference_reconstructor())?;
    let (metrics, _) = pooled_metrics(&maps, cfg)?;
    Ok(dual_gate(metrics, &cfg.thresholds))
}

/// Detection-only rows, in input order.
pub fn detect_samples(samples: &[RunSample], cfg: &PipelineConfig) -> Result<Vec<ReportRow>> {
    samples
        .par_iter()
        .map(|s| {
            let v = detect_frames(&s.frames, cfg)?;
            Ok(ReportRow {
                id: s.id.clone(),
                truth: s.truth,
                predicted: v.class,
                m_anom: v.metrics.m_anom,
                h_norm: v.metrics.h_norm,
                c_local: v.metrics.c_local,
                c_enh: v.metrics.c_enh,
                attack_score: v.attack_score,
                v_sem: None,
                suffix: Vec::new(),
            })
        })
        .collect()
}

/// The full defense on every sample, in input order regardless of how work
/// is scheduled.
pub fn run_samples(
    samples: &[RunSample],
    prompt: &str,
    cfg: &PipelineConfig,
    enc: &dyn DualEncoder,
    vocab: &Vocabulary,
    proj: &Projector,
) -> Result<Vec<ReportRow>> {
    samples
        .par_iter()
        .map(|s| {
            let out = defend(&s.frames, prompt, cfg, enc, vocab, proj)?;
            Ok(ReportRow::from_outcome(&out.record(&s.id, false), s.truth))
        })
        .collect()
}
