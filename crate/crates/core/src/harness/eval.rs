//! Detection metrics over labelled verdicts.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::sentinel::ThreatClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub truth: ThreatClass,
    pub predicted: ThreatClass,
    pub attack_score: f64,
}

/// Binary counts with attacks (either kind) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl BinaryCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR / (P + R)`, written as `2TP / (2TP + FP + FN)` so it stays defined
    /// when either rate is. With no positives and no false alarms it is 1.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// `confusion[truth][predicted]`, indexed by [`ThreatClass::index`].
    pub confusion: [[usize; 3]; 3],
    pub binary: BinaryCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1_binary: f64,
    pub d_acc: f64,
    pub three_way_accuracy: f64,
    /// `None` when the records hold only one binary class.
    pub ap: Option<f64>,
    pub auc: Option<f64>,
}

impl EvalReport {
    pub fn class_total(&self, class: ThreatClass) -> usize {
        self.confusion[class.index()].iter().sum()
    }
}

pub fn confusion(records: &[EvalRecord]) -> [[usize; 3]; 3] {
    let mut m = [[0; 3]; 3];
    for r in records {
        m[r.truth.index()][r.predicted.index()] += 1;
    }
    m
}

pub fn binary_counts(records: &[EvalRecord]) -> BinaryCounts {
    let mut c = BinaryCounts::default();
    for r in records {
        match (r.truth.is_attack(), r.predicted.is_attack()) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub fn evaluate(records: &[EvalRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(invalid("no records to evaluate"));
    }
    if let Some(r) = records.iter().find(|r| !r.attack_score.is_finite()) {
        return Err(invalid(format!("record {} has a non-finite score", r.id)));
    }
    let confusion = confusion(records);
    let binary = binary_counts(records);
    let correct: usize = (0..3).map(|i| confusion[i][i]).sum();
    let scored: Vec<(f64, bool)> = records
        .iter()
        .map(|r| (r.attack_score, r.truth.is_attack()))
        .collect();
    Ok(EvalReport {
        n: records.len(),
        confusion,
        binary,
        precision: binary.precision(),
        recall: binary.recall(),
        f1_binary: binary.f1(),
        d_acc: binary.accuracy(),
        three_way_accuracy: correct as f64 / records.len() as f64,
        ap: average_precision(&scored),
        auc: roc_auc(&scored),
    })
}

/// `P(score_pos > score_neg) + P(tie) / 2` via average ranks.
pub fn roc_auc(scored: &[(f64, bool)]) -> Option<f64> {
    let n_pos = scored.iter().filter(|s| s.1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        pos_rank_sum += avg * order[i..=j].iter().filter(|&&k| scored[k].1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the step precision-recall curve, thresholding at each distinct
/// score from the top; tied scores enter together.
pub fn average_precision(scored: &[(f64, bool)]) -> Option<f64> {
    let n_pos = scored.iter().filter(|s| s.1).count();
    if n_pos == 0 || n_pos == scored.len() {
        return None;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            tp += sorted[j].1 as usize;
            seen += 1;
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = j;
    }
    Some(ap)
}
