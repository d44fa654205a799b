//! Corrective prompt suffixes from latent-space optimization.
//!
//! Starting at the prompt's text embedding, a few plain gradient steps pull
//! the embedding toward the image embeddings of augmented views of the frame
//! while a quadratic penalty keeps it close to where it started. The result is
//! projected into token space and its nearest vocabulary tokens become a
//! suffix appended to the prompt.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedspace::{
    cosine, nn_search, project, DualEncoder, EmbeddingVector, Projector, Vocabulary,
};
use crate::error::{invalid, Result};
use crate::image::Image;

/// Random view parameters for the consistency expectation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Smallest crop area as a fraction of the image.
    pub min_area: f64,
    pub flip_prob: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            min_area: 0.8,
            flip_prob: 0.5,
            noise_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EaptConfig {
    /// Number of gradient steps.
    pub steps: usize,
    /// Learning rate.
    pub eta: f64,
    /// Weight of the drift penalty.
    pub lambda: f64,
    /// Tuning runs only when image/prompt alignment falls below this.
    pub tau_sem: f64,
    /// Augmented views per step.
    pub n_aug: usize,
    /// Number of suffix tokens.
    pub k_suffix: usize,
    pub seed: u64,
    /// Draw fresh views every step (otherwise one set is reused).
    pub resample: bool,
    pub augment: AugmentParams,
}

impl Default for EaptConfig {
    fn default() -> Self {
        Self {
            steps: 3,
            eta: 5e-3,
            lambda: 0.1,
            tau_sem: 0.2,
            n_aug: 4,
            k_suffix: 7,
            seed: 0,
            resample: true,
            augment: AugmentParams::default(),
        }
    }
}

impl EaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("step count must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(invalid("drift weight must be non-negative"));
        }
        if !self.tau_sem.is_finite() {
            return Err(invalid("tau_sem must be finite"));
        }
        if self.n_aug == 0 || self.k_suffix == 0 {
            return Err(invalid("n_aug and k_suffix must be at least 1"));
        }
        let a = &self.augment;
        if !(a.min_area > 0.0 && a.min_area <= 1.0) {
            return Err(invalid("augment min_area must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&a.flip_prob) {
            return Err(invalid("augment flip_prob must lie in [0, 1]"));
        }
        if !(a.noise_sigma.is_finite() && a.noise_sigma >= 0.0) {
            return Err(invalid("augment noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub consistency: f64,
    pub drift: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Losses and gradient norm at each step, evaluated before that step's update.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimTrace {
    pub steps: Vec<StepRecord>,
    pub e_opt: EmbeddingVector,
}

impl OptimTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,consistency,drift,total,grad_norm\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.step, s.consistency, s.drift, s.total, s.grad_norm
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustPrompt {
    pub base: String,
    pub suffix: Vec<String>,
    pub composed: String,
}

/// Random crop (area fraction in `[min_area, 1]`, aspect kept) resized back,
/// optional horizontal flip, then clamped Gaussian noise. Deterministic in
/// `(seed, index)`.
pub fn augment_with(image: &Image, seed: u64, index: u64, p: &AugmentParams) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (h, w) = (image.height(), image.width());

    let area = if p.min_area < 1.0 {
        rng.random_range(p.min_area..=1.0)
    } else {
        1.0
    };
    let side = area.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let mut out = if (ch, cw) == (h, w) {
        image.clone()
    } else {
        image.crop(top, left, ch, cw)?.resize_bilinear(h, w)?
    };
    if rng.random_bool(p.flip_prob) {
        out = out.flip_horizontal();
    }
    if p.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, p.noise_sigma).map_err(|e| invalid(e.to_string()))?;
        out = out.map(|v| v + noise.sample(&mut rng));
    }
    Ok(out)
}

pub fn augment(image: &Image, seed: u64, index: u64) -> Result<Image> {
    augment_with(image, seed, index, &AugmentParams::default())
}

/// Mean of `1 - cos(a_i, e_opt)` over the augmented-view embeddings.
pub fn consistency_loss(e_opt: &EmbeddingVector, aug: &[EmbeddingVector]) -> Result<f64> {
    if aug.is_empty() {
        return Err(invalid("no augmentation embeddings"));
    }
    let mut s = 0.0;
    for a in aug {
        s += 1.0 - cosine(a, e_opt)?;
    }
    Ok(s / aug.len() as f64)
}

/// Squared Euclidean distance.
pub fn drift_loss(e_opt: &EmbeddingVector, e_init: &EmbeddingVector) -> Result<f64> {
    if e_opt.dim() != e_init.dim() {
        return Err(invalid("dimension mismatch in drift loss"));
    }
    Ok(e_opt
        .values()
        .iter()
        .zip(e_init.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// `consistency + lambda * drift`.
pub fn eapt_loss(
    e_opt: &EmbeddingVector,
    aug: &[EmbeddingVector],
    e_init: &EmbeddingVector,
    lambda: f64,
) -> Result<f64> {
    Ok(consistency_loss(e_opt, aug)? + lambda * drift_loss(e_opt, e_init)?)
}

/// Analytic gradient of [`eapt_loss`] with respect to `e_opt`.
pub fn eapt_gradient(
    e_opt: &EmbeddingVector,
    aug: &[EmbeddingVector],
    e_init: &EmbeddingVector,
    lambda: f64,
) -> Result<EmbeddingVector> {
    if aug.is_empty() {
        return Err(invalid("no augmentation embeddings"));
    }
    if e_opt.dim() != e_init.dim() || aug.iter().any(|a| a.dim() != e_opt.dim()) {
        return Err(invalid("dimension mismatch in gradient"));
    }
    let en = e_opt.norm();
    if en == 0.0 {
        return Err(invalid("gradient at the zero vector"));
    }
    let e = e_opt.values();
    let inv_n = 1.0 / aug.len() as f64;
    let mut g = vec![0.0; e.len()];
    for a in aug {
        let an = a.norm();
        if an == 0.0 {
            return Err(invalid("zero augmentation embedding"));
        }
        // d/de cos(a, e) = a / (|a||e|) - (a.e) e / (|a||e|^3)
        let k1 = 1.0 / (an * en);
        let k2 = a.dot(e_opt) / (an * en * en * en);
        for ((gi, ai), ei) in g.iter_mut().zip(a.values()).zip(e) {
            *gi -= inv_n * (ai * k1 - k2 * ei);
        }
    }
    for ((gi, ei), e0) in g.iter_mut().zip(e).zip(e_init.values()) {
        *gi += 2.0 * lambda * (ei - e0);
    }
    EmbeddingVector::new(g)
}

/// Plain gradient descent from `e_init`; `views(k)` supplies the augmentation
/// embeddings for step `k` (0-based).
pub fn descend(
    e_init: &EmbeddingVector,
    cfg: &EaptConfig,
    mut views: impl FnMut(usize) -> Result<Vec<EmbeddingVector>>,
) -> Result<(EmbeddingVector, OptimTrace)> {
    cfg.validate()?;
    let mut e = e_init.clone();
    let mut steps = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        let aug = views(k)?;
        let consistency = consistency_loss(&e, &aug)?;
        let drift = drift_loss(&e, e_init)?;
        let grad = eapt_gradient(&e, &aug, e_init, cfg.lambda)?;
        steps.push(StepRecord {
            step: k + 1,
            consistency,
            drift,
            total: consistency + cfg.lambda * drift,
            grad_norm: grad.norm(),
        });
        e = &e - &grad.scaled(cfg.eta);
    }
    Ok((e.clone(), OptimTrace { steps, e_opt: e }))
}

/// [`descend`] with the same views at every step.
pub fn descend_fixed(
    e_init: &EmbeddingVector,
    aug: &[EmbeddingVector],
    cfg: &EaptConfig,
) -> Result<(EmbeddingVector, OptimTrace)> {
    descend(e_init, cfg, |_| Ok(aug.to_vec()))
}

/// Optimizes the prompt embedding against augmented views of `image`.
pub fn optimize_suffix_embedding(
    image: &Image,
    prompt: &str,
    enc: &dyn DualEncoder,
    cfg: &EaptConfig,
) -> Result<(EmbeddingVector, OptimTrace)> {
    cfg.validate()?;
    let e_init = enc.encode_text(prompt)?;
    let embed_views = |first: u64| -> Result<Vec<EmbeddingVector>> {
        (first..first + cfg.n_aug as u64)
            .map(|i| enc.encode_image(&augment_with(image, cfg.seed, i, &cfg.augment)?))
            .collect()
    };
    if cfg.resample {
        descend(&e_init, cfg, |k| embed_views((k * cfg.n_aug) as u64))
    } else {
        let fixed = embed_views(0)?;
        descend_fixed(&e_init, &fixed, cfg)
    }
}

/// Nearest `k_suffix` vocabulary tokens to the projected embedding, best first.
pub fn generate_suffix(
    e_opt: &EmbeddingVector,
    projector: &Projector,
    vocab: &Vocabulary,
    k_suffix: usize,
) -> Result<Vec<String>> {
    if projector.d_out() != vocab.dim() {
        return Err(invalid(format!(
            "projector outputs dimension {}, vocabulary has {}",
            projector.d_out(),
            vocab.dim()
        )));
    }
    let projected = project(e_opt, projector)?;
    Ok(nn_search(&projected, vocab, k_suffix)?
        .into_iter()
        .map(|n| n.token)
        .collect())
}

pub fn compose_prompt(prompt: &str, suffix: &[String]) -> RobustPrompt {
    let composed = if suffix.is_empty() {
        prompt.to_string()
    } else {
        format!("{prompt} {}", suffix.join(" "))
    };
    RobustPrompt {
        base: prompt.to_string(),
        suffix: suffix.to_vec(),
        composed,
    }
}
