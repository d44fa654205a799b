//! Reconstruction-error statistics and the two-stage threat gate.
//!
//! Four numbers summarize an [`ErrorMap`]: the tail-mean anomaly magnitude,
//! the Shannon entropy of the normalized block energies, the share of loss
//! held by the heaviest connected cluster of hot blocks, and that share
//! attenuated by entropy. The gate first decides attacked-vs-clean, then
//! local-vs-global.

mod components;

pub use components::{
    active_mask, connected_components, rank_by_loss, BlockMask, Component, Connectivity,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::errormap::ErrorMap;

/// Total block loss below which a map is treated as perfectly reconstructed.
pub const EPS_TOTAL: f64 = 1e-9;

/// Three-way triage outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThreatClass {
    #[serde(rename = "clean")]
    Clean,
    #[serde(rename = "global")]
    GlobalAttack,
    #[serde(rename = "local")]
    LocalAttack,
}

impl ThreatClass {
    pub const ALL: [ThreatClass; 3] = [Self::Clean, Self::GlobalAttack, Self::LocalAttack];

    pub fn is_attack(self) -> bool {
        self != Self::Clean
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::GlobalAttack => "global",
            Self::LocalAttack => "local",
        }
    }
}

impl fmt::Display for ThreatClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThreatClass {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clean" => Ok(Self::Clean),
            "global" | "globalattack" => Ok(Self::GlobalAttack),
            "local" | "localattack" => Ok(Self::LocalAttack),
            other => Err(invalid(format!("unknown class {other:?}"))),
        }
    }
}

/// Gate thresholds and metric shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    /// Anomaly-magnitude threshold.
    pub t_s: f64,
    /// Concentration threshold for the soft-recall path of stage I.
    pub t_cc1: f64,
    /// Concentration threshold separating local from global in stage II.
    pub t_cc2: f64,
    /// Tail confidence level for the anomaly magnitude.
    pub alpha: f64,
    /// Entropy attenuation exponent.
    pub beta: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        Self {
            t_s: 0.2,
            t_cc1: 0.03,
            t_cc2: 0.02,
            alpha: 0.95,
            beta: 0.8,
        }
    }
}

impl GateThresholds {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("t_s", self.t_s)?;
        positive("t_cc1", self.t_cc1)?;
        positive("t_cc2", self.t_cc2)?;
        positive("beta", self.beta)?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.t_cc2 > self.t_cc1 {
            return Err(invalid(format!(
                "t_cc2 ({}) must not exceed t_cc1 ({})",
                self.t_cc2, self.t_cc1
            )));
        }
        Ok(())
    }
}

/// Entropy and concentration statistics of one error map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMetrics {
    /// Shannon entropy of the block energy distribution, in nats.
    pub h_energy: f64,
    pub h_norm: f64,
    pub c_local: f64,
    pub c_enh: f64,
    /// Heaviest connected cluster of hot blocks; empty when none exist.
    pub largest_component: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub m_anom: f64,
    pub h_energy: f64,
    pub h_norm: f64,
    pub c_local: f64,
    pub c_enh: f64,
    pub largest_component: Vec<(usize, usize)>,
}

impl DetectionMetrics {
    pub fn new(m_anom: f64, spatial: SpatialMetrics) -> Self {
        Self {
            m_anom,
            h_energy: spatial.h_energy,
            h_norm: spatial.h_norm,
            c_local: spatial.c_local,
            c_enh: spatial.c_enh,
            largest_component: spatial.largest_component,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub class: ThreatClass,
    pub metrics: DetectionMetrics,
    /// Continuous attack score; exceeds 1 exactly when stage I fires.
    pub attack_score: f64,
}

/// Conditional value-at-risk of the losses: the mean of every loss at or
/// above the empirical `alpha`-quantile.
///
/// The quantile is the `ceil(alpha * n)`-th smallest value (1-indexed), so the
/// tail is never empty.
pub fn anomaly_magnitude(losses: &[f64], alpha: f64) -> Result<f64> {
    if losses.is_empty() {
        return Err(invalid("anomaly magnitude of an empty loss list"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if let Some(v) = losses.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(invalid(format!("loss {v} is negative or non-finite")));
    }
    if losses.len() == 1 {
        return Ok(losses[0]);
    }
    let mut sorted = losses.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let var = sorted[quantile_rank(alpha, sorted.len()) - 1];
    // Everything from the first occurrence of `var` onward is in the tail.
    let start = sorted.partition_point(|&v| v < var);
    let tail = &sorted[start..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// 1-based rank of the empirical quantile. The small slack absorbs
/// representation error in products such as `0.95 * 20`.
fn quantile_rank(alpha: f64, n: usize) -> usize {
    let k = (alpha * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Shannon entropy (nats) of the normalized block losses and its value
/// divided by `ln |blocks|`.
pub fn energy_entropy(map: &ErrorMap) -> (f64, f64) {
    let max_h = (map.len() as f64).ln();
    let total = map.total();
    if total < EPS_TOTAL {
        return (max_h, 1.0);
    }
    let h = -map
        .values()
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| {
            let e = l / total;
            e * e.ln()
        })
        .sum::<f64>();
    let h = h.clamp(0.0, max_h);
    (h, (h / max_h).clamp(0.0, 1.0))
}

/// Largest component loss share relative to the loss of the whole map.
pub fn local_concentration(map: &ErrorMap, components: &[Component]) -> f64 {
    let total = map.total();
    if total < EPS_TOTAL {
        return 0.0;
    }
    components
        .iter()
        .map(|c| c.loss_sum(map) / total)
        .fold(0.0, f64::max)
        .clamp(0.0, 1.0)
}

pub fn enhanced_concentration(c_local: f64, h_norm: f64, beta: f64) -> f64 {
    c_local * (1.0 - h_norm).max(0.0).powf(beta)
}

/// Entropy and concentration of one map.
pub fn spatial_metrics(map: &ErrorMap, beta: f64, connectivity: Connectivity) -> SpatialMetrics {
    let (h_energy, h_norm) = energy_entropy(map);
    let degenerate = map.total() < EPS_TOTAL;
    let mut comps = if degenerate {
        Vec::new()
    } else {
        connected_components(&active_mask(map), connectivity)
    };
    rank_by_loss(&mut comps, map);
    let c_local = local_concentration(map, &comps);
    SpatialMetrics {
        h_energy,
        h_norm,
        c_local,
        c_enh: enhanced_concentration(c_local, h_norm, beta),
        largest_component: comps
            .into_iter()
            .next()
            .map(|c| c.blocks)
            .unwrap_or_default(),
    }
}

/// Full metric tuple of a single map.
pub fn detection_metrics(
    map: &ErrorMap,
    th: &GateThresholds,
    connectivity: Connectivity,
) -> Result<DetectionMetrics> {
    let m_anom = anomaly_magnitude(map.values(), th.alpha)?;
    Ok(DetectionMetrics::new(
        m_anom,
        spatial_metrics(map, th.beta, connectivity),
    ))
}

/// Stage I (attacked?) and stage II (local or global?) on the two scalar
/// statistics that drive them. All comparisons are strict.
pub fn classify(m_anom: f64, c_enh: f64, th: &GateThresholds) -> ThreatClass {
    let attacked = m_anom > th.t_s || c_enh > th.t_cc1;
    if !attacked {
        ThreatClass::Clean
    } else if c_enh > th.t_cc2 {
        ThreatClass::LocalAttack
    } else {
        ThreatClass::GlobalAttack
    }
}

/// Threshold-normalized score that is > 1 exactly when stage I fires.
pub fn attack_score(m_anom: f64, c_enh: f64, th: &GateThresholds) -> f64 {
    (m_anom / th.t_s).max(c_enh / th.t_cc1)
}

pub fn dual_gate(metrics: DetectionMetrics, th: &GateThresholds) -> Verdict {
    let mut class = classify(metrics.m_anom, metrics.c_enh, th);
    if class == ThreatClass::LocalAttack && metrics.largest_component.is_empty() {
        // Concentration without a component can only come from hand-built
        // metrics; there is nothing to mask, so fall back to global handling.
        class = ThreatClass::GlobalAttack;
    }
    Verdict {
        class,
        attack_score: attack_score(metrics.m_anom, metrics.c_enh, th),
        metrics,
    }
}
