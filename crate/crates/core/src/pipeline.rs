//! End-to-end defense: detect, then purify patches or tune the prompt.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedspace::{semantic_verification, DualEncoder, Projector, Vocabulary};
use crate::error::{invalid, Result};
use crate::errormap::{
    block_losses, reconstruct, BlockGrid, ErrorMap, Reconstructor, ReferenceReconstructor,
    DEFAULT_GRID,
};
use crate::image::Image;
use crate::prompt_tuning::{
    compose_prompt, generate_suffix, optimize_suffix_embedding, EaptConfig, OptimTrace,
    RobustPrompt,
};
use crate::purifier::{apply_gray_mask, build_mask, PixelMask, DEFAULT_DILATION, DEFAULT_GRAY};
use crate::sentinel::{
    anomaly_magnitude, dual_gate, spatial_metrics, Connectivity, DetectionMetrics, GateThresholds,
    SpatialMetrics, ThreatClass, Verdict,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconstructorKind {
    #[default]
    LowPass,
    Median,
}

impl fmt::Display for ReconstructorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LowPass => "lowpass",
            Self::Median => "median",
        })
    }
}

impl FromStr for ReconstructorKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lowpass" => Ok(Self::LowPass),
            "median" => Ok(Self::Median),
            other => Err(invalid(format!("unknown reconstructor {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub thresholds: GateThresholds,
    pub eapt: EaptConfig,
    /// Requested block rows; see [`BlockGrid::fit`].
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub reconstructor: ReconstructorKind,
    pub lowpass_factor: usize,
    pub median_k: usize,
    pub gray: f64,
    /// Mask growth around the detected component, in blocks.
    pub dilation: usize,
    pub connectivity: Connectivity,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            thresholds: GateThresholds::default(),
            eapt: EaptConfig::default(),
            grid_rows: DEFAULT_GRID,
            grid_cols: DEFAULT_GRID,
            reconstructor: ReconstructorKind::LowPass,
            lowpass_factor: 4,
            median_k: 5,
            gray: DEFAULT_GRAY,
            dilation: DEFAULT_DILATION,
            connectivity: Connectivity::Eight,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        self.eapt.validate()?;
        if self.grid_rows < 2 || self.grid_cols < 2 {
            return Err(invalid("grid needs at least 2 rows and 2 columns"));
        }
        if self.lowpass_factor == 0 {
            return Err(invalid("lowpass_factor must be positive"));
        }
        if self.median_k.is_multiple_of(2) {
            return Err(invalid("median_k must be odd"));
        }
        if !(0.0..=1.0).contains(&self.gray) {
            return Err(invalid("gray must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn reference_reconstructor(&self) -> ReferenceReconstructor {
        match self.reconstructor {
            ReconstructorKind::LowPass => ReferenceReconstructor::LowPass {
                factor: self.lowpass_factor,
            },
            ReconstructorKind::Median => ReferenceReconstructor::Median { k: self.median_k },
        }
    }

    pub fn grid_for(&self, image: &Image) -> Result<BlockGrid> {
        BlockGrid::fit(
            image.height(),
            image.width(),
            self.grid_rows,
            self.grid_cols,
        )
    }
}

/// Wall time spent in each stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub detect: Duration,
    pub purify: Duration,
    pub verify: Duration,
    pub tune: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseOutcome {
    pub verdict: Verdict,
    /// Frame whose spatial statistics drove the verdict.
    pub representative_frame: usize,
    /// Purified frames, present only for local attacks.
    pub purified: Option<Vec<Image>>,
    pub mask: Option<PixelMask>,
    pub robust_prompt: Option<RobustPrompt>,
    pub v_sem: Option<f64>,
    pub trace: Option<OptimTrace>,
    /// Prompt handed downstream: the robust prompt if one was built, else the
    /// input prompt unchanged.
    pub prompt: String,
    pub grid: BlockGrid,
    pub timings: Timings,
}

impl DefenseOutcome {
    /// Single-frame convenience accessor.
    pub fn purified_image(&self) -> Option<&Image> {
        self.purified.as_ref().and_then(|v| v.last())
    }

    pub fn suffix(&self) -> &[String] {
        self.robust_prompt
            .as_ref()
            .map(|p| p.suffix.as_slice())
            .unwrap_or_default()
    }

    pub fn record(&self, id: &str, include_timings: bool) -> OutcomeRecord {
        let m = &self.verdict.metrics;
        OutcomeRecord {
            id: id.to_string(),
            verdict: self.verdict.class,
            m_anom: m.m_anom,
            h_energy: m.h_energy,
            h_norm: m.h_norm,
            c_local: m.c_local,
            c_enh: m.c_enh,
            attack_score: self.verdict.attack_score,
            largest_component: m.largest_component.clone(),
            representative_frame: self.representative_frame,
            v_sem: self.v_sem,
            suffix: self.suffix().to_vec(),
            prompt: self.prompt.clone(),
            timings_ms: include_timings.then(|| TimingsMs {
                detect: ms(self.timings.detect),
                purify: ms(self.timings.purify),
                verify: ms(self.timings.verify),
                tune: ms(self.timings.tune),
            }),
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingsMs {
    pub detect: f64,
    pub purify: f64,
    pub verify: f64,
    pub tune: f64,
}

/// Flat, serializable view of one [`DefenseOutcome`] (one JSON line each).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub id: String,
    pub verdict: ThreatClass,
    pub m_anom: f64,
    pub h_energy: f64,
    pub h_norm: f64,
    pub c_local: f64,
    pub c_enh: f64,
    pub attack_score: f64,
    pub largest_component: Vec<(usize, usize)>,
    pub representative_frame: usize,
    pub v_sem: Option<f64>,
    pub suffix: Vec<String>,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timings_ms: Option<TimingsMs>,
}

impl OutcomeRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("outcome records always serialize")
    }
}

/// Downstream model call. The shipped [`EchoResponder`] returns its inputs.
pub trait Responder {
    type Output;
    fn respond(&self, frames: &[Image], prompt: &str) -> Self::Output;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EchoResponder;

impl Responder for EchoResponder {
    type Output = (Vec<Image>, String);

    fn respond(&self, frames: &[Image], prompt: &str) -> Self::Output {
        (frames.to_vec(), prompt.to_string())
    }
}

/// Error maps of every frame, in frame order.
pub fn frame_error_maps(
    frames: &[Image],
    grid: &BlockGrid,
    reconstructor: &dyn Reconstructor,
) -> Result<Vec<ErrorMap>> {
    frames
        .par_iter()
        .map(|f| block_losses(f, &reconstruct(f, reconstructor)?, grid))
        .collect()
}

/// Pooled-tail magnitude plus the spatial statistics of the most
/// concentrated frame. Returns the representative frame index too.
pub fn pooled_metrics(
    maps: &[ErrorMap],
    cfg: &PipelineConfig,
) -> Result<(DetectionMetrics, usize)> {
    if maps.is_empty() {
        return Err(invalid("no error maps"));
    }
    let pooled: Vec<f64> = maps
        .iter()
        .flat_map(|m| m.values().iter().copied())
        .collect();
    let m_anom = anomaly_magnitude(&pooled, cfg.thresholds.alpha)?;
    let spatial: Vec<SpatialMetrics> = maps
        .iter()
        .map(|m| spatial_metrics(m, cfg.thresholds.beta, cfg.connectivity))
        .collect();
    let mut rep = 0;
    for (i, s) in spatial.iter().enumerate() {
        if s.c_enh > spatial[rep].c_enh {
            rep = i;
        }
    }
    let best = spatial.into_iter().nth(rep).expect("index in range");
    Ok((DetectionMetrics::new(m_anom, best), rep))
}

/// Runs the full defense with the configured reference reconstructor.
pub fn defend(
    frames: &[Image],
    prompt: &str,
    cfg: &PipelineConfig,
    enc: &dyn DualEncoder,
    vocab: &Vocabulary,
    proj: &Projector,
) -> Result<DefenseOutcome> {
    defend_with(
        frames,
        prompt,
        cfg,
        &cfg.reference_reconstructor(),
        enc,
        vocab,
        proj,
    )
}

/// [`defend`] with a caller-supplied reconstructor.
pub fn defend_with(
    frames: &[Image],
    prompt: &str,
    cfg: &PipelineConfig,
    reconstructor: &dyn Reconstructor,
    enc: &dyn DualEncoder,
    vocab: &Vocabulary,
    proj: &Projector,
) -> Result<DefenseOutcome> {
    let start = Instant::now();
    let grid = check_frames(frames, cfg)?;
    let maps = frame_error_maps(frames, &grid, reconstructor)?;
    defend_maps_timed(frames, &maps, grid, prompt, cfg, enc, vocab, proj, start)
}

/// [`defend`] on precomputed (for example imported) error maps, one per frame.
pub fn defend_maps(
    frames: &[Image],
    maps: &[ErrorMap],
    prompt: &str,
    cfg: &PipelineConfig,
    enc: &dyn DualEncoder,
    vocab: &Vocabulary,
    proj: &Projector,
) -> Result<DefenseOutcome> {
    let grid = check_frames(frames, cfg)?;
    if maps.len() != frames.len() {
        return Err(invalid("need exactly one error map per frame"));
    }
    if maps
        .iter()
        .any(|m| m.rows() != grid.rows || m.cols() != grid.cols)
    {
        return Err(invalid(format!(
            "error maps must be {}x{} to match the block grid",
            grid.rows, grid.cols
        )));
    }
    defend_maps_timed(
        frames,
        maps,
        grid,
        prompt,
        cfg,
        enc,
        vocab,
        proj,
        Instant::now(),
    )
}

fn check_frames(frames: &[Image], cfg: &PipelineConfig) -> Result<BlockGrid> {
    cfg.validate()?;
    let first = frames.first().ok_or_else(|| invalid("no frames"))?;
    if frames.iter().any(|f| !f.same_shape(first)) {
        return Err(invalid("all frames must share one shape"));
    }
    cfg.grid_for(first)
}

#[allow(clippy::too_many_arguments)]
fn defend_maps_timed(
    frames: &[Image],
    maps: &[ErrorMap],
    grid: BlockGrid,
    prompt: &str,
    cfg: &PipelineConfig,
    enc: &dyn DualEncoder,
    vocab: &Vocabulary,
    proj: &Projector,
    start: Instant,
) -> Result<DefenseOutcome> {
    let mut timings = Timings::default();
    let (metrics, rep) = pooled_metrics(maps, cfg)?;
    let verdict = dual_gate(metrics, &cfg.thresholds);
    timings.detect = start.elapsed();

    let mut outcome = DefenseOutcome {
        representative_frame: rep,
        purified: None,
        mask: None,
        robust_prompt: None,
        v_sem: None,
        trace: None,
        prompt: prompt.to_string(),
        grid,
        timings,
        verdict,
    };

    match outcome.verdict.class {
        ThreatClass::Clean => {}
        ThreatClass::LocalAttack => {
            let t = Instant::now();
            let first = &frames[0];
            let mask = build_mask(
                &outcome.verdict.metrics.largest_component,
                &grid,
                cfg.dilation,
                first.height(),
                first.width(),
            )?;
            let purified = frames
                .iter()
                .map(|f| apply_gray_mask(f, &mask, cfg.gray))
                .collect::<Result<Vec<_>>>()?;
            outcome.purified = Some(purified);
            outcome.mask = Some(mask);
            outcome.timings.purify = t.elapsed();
        }
        ThreatClass::GlobalAttack => {
            let t = Instant::now();
            let last = frames.last().expect("frames checked non-empty");
            let v_sem = semantic_verification(last, prompt, enc)?;
            outcome.v_sem = Some(v_sem);
            outcome.timings.verify = t.elapsed();
            if v_sem < cfg.eapt.tau_sem {
                let t = Instant::now();
                let (e_opt, trace) = optimize_suffix_embedding(last, prompt, enc, &cfg.eapt)?;
                let suffix = generate_suffix(&e_opt, proj, vocab, cfg.eapt.k_suffix)?;
                let robust = compose_prompt(prompt, &suffix);
                outcome.prompt = robust.composed.clone();
                outcome.robust_prompt = Some(robust);
                outcome.trace = Some(trace);
                outcome.timings.tune = t.elapsed();
            }
        }
    }
    Ok(outcome)
}
