//! Exhaustive threshold search on labelled detection statistics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::sentinel::{classify, GateThresholds, ThreatClass};

use super::eval::{binary_counts, confusion, EvalRecord};

/// The two statistics the gate consumes, plus the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub id: String,
    pub truth: ThreatClass,
    pub m_anom: f64,
    pub c_enh: f64,
    /// Whether the map had an active component; without one a local verdict
    /// degrades to global, as in the gate itself.
    pub has_component: bool,
}

impl CalibrationSample {
    pub fn predict(&self, th: &GateThresholds) -> ThreatClass {
        match classify(self.m_anom, self.c_enh, th) {
            ThreatClass::LocalAttack if !self.has_component => ThreatClass::GlobalAttack,
            c => c,
        }
    }
}

/// Candidate values per threshold. Combinations with `t_cc2 > t_cc1` are
/// skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub t_s: Vec<f64>,
    pub t_cc1: Vec<f64>,
    pub t_cc2: Vec<f64>,
}

impl ThresholdGrid {
    /// Single-point grid.
    pub fn point(th: &GateThresholds) -> Self {
        Self {
            t_s: vec![th.t_s],
            t_cc1: vec![th.t_cc1],
            t_cc2: vec![th.t_cc2],
        }
    }

    /// `per_decade` log-spaced values per decade over each range, endpoints
    /// included.
    pub fn log_spaced(t_s: (f64, f64), t_cc: (f64, f64), per_decade: usize) -> Result<Self> {
        let axis = |(lo, hi): (f64, f64)| -> Result<Vec<f64>> {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) || per_decade == 0 {
                return Err(invalid(format!("bad grid range [{lo}, {hi}]")));
            }
            let steps = ((hi / lo).log10() * per_decade as f64).round() as usize;
            if steps == 0 {
                return Ok(vec![lo]);
            }
            let (a, b) = (lo.ln(), hi.ln());
            Ok((0..=steps)
                .map(|i| (a + (b - a) * i as f64 / steps as f64).exp())
                .collect())
        };
        let cc = axis(t_cc)?;
        Ok(Self {
            t_s: axis(t_s)?,
            t_cc1: cc.clone(),
            t_cc2: cc,
        })
    }

    pub fn candidates(&self) -> usize {
        self.t_s.len()
            * self
                .t_cc1
                .iter()
                .map(|a| self.t_cc2.iter().filter(|&&b| b <= *a).count())
                .sum::<usize>()
    }
}

impl Default for ThresholdGrid {
    /// 1e-6..1 for the magnitude, 1e-3..1 for the concentration thresholds,
    /// ten points per decade.
    fn default() -> Self {
        Self::log_spaced((1e-6, 1.0), (1e-3, 1.0), 10).expect("static ranges are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub thresholds: GateThresholds,
    pub f1_binary: f64,
    pub three_way_accuracy: f64,
    pub candidates: usize,
}

/// Maximizes binary F1, then three-way accuracy, then prefers the smallest
/// `t_s`, `t_cc1`, `t_cc2` in that order. `base` supplies `alpha` and `beta`.
pub fn calibrate(
    samples: &[CalibrationSample],
    grid: &ThresholdGrid,
    base: &GateThresholds,
) -> Result<Calibration> {
    for c in ThreatClass::ALL {
        if !samples.iter().any(|s| s.truth == c) {
            return Err(invalid(format!("calibration set has no {c} samples")));
        }
    }
    if let Some(s) = samples
        .iter()
        .find(|s| !s.m_anom.is_finite() || !s.c_enh.is_finite())
    {
        return Err(invalid(format!(
            "sample {} has non-finite statistics",
            s.id
        )));
    }
    let sorted = |v: &[f64]| -> Result<Vec<f64>> {
        if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(invalid("grid values must be positive and finite"));
        }
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        Ok(v)
    };
    let (ts, c1, c2) = (
        sorted(&grid.t_s)?,
        sorted(&grid.t_cc1)?,
        sorted(&grid.t_cc2)?,
    );

    let mut best: Option<Calibration> = None;
    let mut candidates = 0;
    let mut records: Vec<EvalRecord> = samples
        .iter()
        .map(|s| EvalRecord {
            id: s.id.clone(),
            truth: s.truth,
            predicted: ThreatClass::Clean,
            attack_score: 0.0,
        })
        .collect();
    // Ascending iteration plus strict improvement keeps the smallest
    // thresholds among ties.
    for &t_s in &ts {
        for &t_cc1 in &c1 {
            for &t_cc2 in c2.iter().take_while(|&&b| b <= t_cc1) {
                candidates += 1;
                let th = GateThresholds {
                    t_s,
                    t_cc1,
                    t_cc2,
                    ..*base
                };
                for (r, s) in records.iter_mut().zip(samples) {
                    r.predicted = s.predict(&th);
                }
                let f1 = binary_counts(&records).f1();
                let m = confusion(&records);
                let acc = (0..3).map(|i| m[i][i]).sum::<usize>() as f64 / samples.len() as f64;
                let better = match &best {
                    None => true,
                    Some(b) => {
                        f1 > b.f1_binary || (f1 == b.f1_binary && acc > b.three_way_accuracy)
                    }
                };
                if better {
                    best = Some(Calibration {
                        thresholds: th,
                        f1_binary: f1,
                        three_way_accuracy: acc,
                        candidates: 0,
                    });
                }
            }
        }
    }
    let mut best = best.ok_or_else(|| invalid("threshold grid has no admissible point"))?;
    best.candidates = candidates;
    Ok(best)
}
