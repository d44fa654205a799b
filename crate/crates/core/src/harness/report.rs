//! Per-sample CSV reports with a trailing `# key = value` summary block, and
//! per-class metric histograms.

use std::io::Write;

use crate::error::{invalid, parse_err, Result};
use crate::pipeline::OutcomeRecord;
use crate::sentinel::{GateThresholds, ThreatClass};

use super::calibrate::CalibrationSample;
use super::eval::{EvalRecord, EvalReport};

pub const REPORT_HEADER: [&str; 10] = [
    "id",
    "truth",
    "predicted",
    "m_anom",
    "h_norm",
    "c_local",
    "c_enh",
    "attack_score",
    "v_sem",
    "suffix",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub id: String,
    pub truth: Option<ThreatClass>,
    pub predicted: ThreatClass,
    pub m_anom: f64,
    pub h_norm: f64,
    pub c_local: f64,
    pub c_enh: f64,
    pub attack_score: f64,
    pub v_sem: Option<f64>,
    pub suffix: Vec<String>,
}

impl ReportRow {
    pub fn from_outcome(rec: &OutcomeRecord, truth: Option<ThreatClass>) -> Self {
        Self {
            id: rec.id.clone(),
            truth,
            predicted: rec.verdict,
            m_anom: rec.m_anom,
            h_norm: rec.h_norm,
            c_local: rec.c_local,
            c_enh: rec.c_enh,
            attack_score: rec.attack_score,
            v_sem: rec.v_sem,
            suffix: rec.suffix.clone(),
        }
    }

    pub fn eval_record(&self) -> Result<EvalRecord> {
        Ok(EvalRecord {
            id: self.id.clone(),
            truth: self
                .truth
                .ok_or_else(|| invalid(format!("row {} has no ground truth", self.id)))?,
            predicted: self.predicted,
            attack_score: self.attack_score,
        })
    }

    /// A component exists exactly when the concentration is positive.
    pub fn calibration_sample(&self) -> Result<CalibrationSample> {
        Ok(CalibrationSample {
            id: self.id.clone(),
            truth: self
                .truth
                .ok_or_else(|| invalid(format!("row {} has no ground truth", self.id)))?,
            m_anom: self.m_anom,
            c_enh: self.c_enh,
            has_component: self.c_local > 0.0,
        })
    }
}

/// Summary block written after the rows.
#[derive(Debug, Clone, Default)]
pub struct Summary<'a> {
    pub thresholds: Option<&'a GateThresholds>,
    pub eval: Option<&'a EvalReport>,
}

pub fn summary_lines(summary: &Summary<'_>) -> Vec<(String, String)> {
    let mut kv = Vec::new();
    if let Some(th) = summary.thresholds {
        for (k, v) in [
            ("t_s", th.t_s),
            ("t_cc1", th.t_cc1),
            ("t_cc2", th.t_cc2),
            ("alpha", th.alpha),
            ("beta", th.beta),
        ] {
            kv.push((k.to_string(), v.to_string()));
        }
    }
    if let Some(r) = summary.eval {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
        kv.push(("n".into(), r.n.to_string()));
        kv.push(("tp".into(), r.binary.tp.to_string()));
        kv.push(("fp".into(), r.binary.fp.to_string()));
        kv.push(("fn".into(), r.binary.fn_.to_string()));
        kv.push(("tn".into(), r.binary.tn.to_string()));
        kv.push(("precision".into(), r.precision.to_string()));
        kv.push(("recall".into(), r.recall.to_string()));
        kv.push(("f1_binary".into(), r.f1_binary.to_string()));
        kv.push(("d_acc".into(), r.d_acc.to_string()));
        kv.push((
            "three_way_accuracy".into(),
            r.three_way_accuracy.to_string(),
        ));
        kv.push(("ap".into(), opt(r.ap)));
        kv.push(("auc".into(), opt(r.auc)));
        for t in ThreatClass::ALL {
            let row = r.confusion[t.index()];
            kv.push((
                format!("confusion.{t}"),
                format!("{} {} {}", row[0], row[1], row[2]),
            ));
        }
    }
    kv
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_report(mut out: impl Write, rows: &[ReportRow], summary: &Summary<'_>) -> Result<()> {
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(REPORT_HEADER)?;
        for r in rows {
            w.write_record([
                r.id.clone(),
                r.truth.map(|t| t.to_string()).unwrap_or_default(),
                r.predicted.to_string(),
                r.m_anom.to_string(),
                r.h_norm.to_string(),
                r.c_local.to_string(),
                r.c_enh.to_string(),
                r.attack_score.to_string(),
                opt_f64(r.v_sem),
                r.suffix.join(" "),
            ])?;
        }
        w.flush()?;
    }
    for (k, v) in summary_lines(summary) {
        writeln!(out, "# {k} = {v}")?;
    }
    Ok(())
}

pub fn report_string(rows: &[ReportRow], summary: &Summary<'_>) -> String {
    let mut buf = Vec::new();
    write_report(&mut buf, rows, summary).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("report is UTF-8")
}

/// Parses the rows of a report; summary lines are ignored.
pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(parse_err(
            1,
            format!("unexpected header, want {}", REPORT_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != REPORT_HEADER.len() {
            return Err(parse_err(line, "wrong field count"));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = rec[i].trim().parse().map_err(|_| {
                parse_err(
                    line,
                    format!("{}: not a number: {:?}", REPORT_HEADER[i], &rec[i]),
                )
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(line, format!("{}: not finite", REPORT_HEADER[i])))
            }
        };
        let class = |i: usize| -> Result<ThreatClass> {
            rec[i]
                .parse()
                .map_err(|e: crate::Error| parse_err(line, e.to_string()))
        };
        // Ids follow the manifest rules so a written report always re-parses.
        if rec[0].trim().is_empty() || rec[0].trim() != &rec[0] || rec[0].starts_with('#') {
            return Err(parse_err(line, format!("bad id {:?}", &rec[0])));
        }
        rows.push(ReportRow {
            id: rec[0].to_string(),
            truth: if rec[1].trim().is_empty() {
                None
            } else {
                Some(class(1)?)
            },
            predicted: class(2)?,
            m_anom: num(3)?,
            h_norm: num(4)?,
            c_local: num(5)?,
            c_enh: num(6)?,
            attack_score: num(7)?,
            v_sem: if rec[8].trim().is_empty() {
                None
            } else {
                Some(num(8)?)
            },
            suffix: rec[9].split_whitespace().map(str::to_string).collect(),
        });
    }
    Ok(rows)
}

pub const DIST_BINS: usize = 20;

type Metric = (&'static str, fn(&ReportRow) -> f64);

/// Histograms of `log10(m_anom)`, `h_norm`, `c_enh` and `log10(attack_score)`
/// per true class, with bins shared across classes. Rows without ground truth
/// are grouped under `unlabelled`.
pub fn write_distributions(mut out: impl Write, rows: &[ReportRow]) -> Result<()> {
    fn log(v: f64) -> f64 {
        v.max(1e-12).log10()
    }
    let metrics: [Metric; 4] = [
        ("log10_m_anom", |r| log(r.m_anom)),
        ("h_norm", |r| r.h_norm),
        ("c_enh", |r| r.c_enh),
        ("log10_attack_score", |r| log(r.attack_score)),
    ];
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(["metric", "class", "bin_lo", "bin_hi", "count"])?;
    if rows.is_empty() {
        w.flush()?;
        return Ok(());
    }
    let mut groups: Vec<&str> = ThreatClass::ALL
        .iter()
        .filter(|c| rows.iter().any(|r| r.truth == Some(**c)))
        .map(|c| c.as_str())
        .collect();
    if rows.iter().any(|r| r.truth.is_none()) {
        groups.push("unlabelled");
    }
    for (name, f) in &metrics {
        let vals: Vec<f64> = rows.iter().map(f).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1.0;
        }
        let width = (hi - lo) / DIST_BINS as f64;
        for g in &groups {
            let mut counts = [0usize; DIST_BINS];
            for (r, v) in rows.iter().zip(&vals) {
                if r.truth.map_or("unlabelled", |t| t.as_str()) == *g {
                    let b = (((v - lo) / width) as usize).min(DIST_BINS - 1);
                    counts[b] += 1;
                }
            }
            for (b, c) in counts.iter().enumerate() {
                w.write_record([
                    name.to_string(),
                    g.to_string(),
                    (lo + width * b as f64).to_string(),
                    (lo + width * (b + 1) as f64).to_string(),
                    c.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::eval::evaluate;
    use crate::Error;

    fn rows() -> Vec<ReportRow> {
        vec![
            ReportRow {
                id: "a,1".into(),
                truth: Some(ThreatClass::Clean),
                predicted: ThreatClass::Clean,
                m_anom: 1.234e-6,
                h_norm: 0.99,
                c_local: 0.0,
                c_enh: 0.0,
                attack_score: 0.1,
                v_sem: None,
                suffix: vec![],
            },
            ReportRow {
                id: "b".into(),
                truth: Some(ThreatClass::GlobalAttack),
                predicted: ThreatClass::GlobalAttack,
                m_anom: 0.1 + 0.2,
                h_norm: 0.97,
                c_local: 0.01,
                c_enh: 0.0004,
                attack_score: 3.5,
                v_sem: Some(-0.0312),
                suffix: vec!["kalomi".into(), "tesu".into()],
            },
            ReportRow {
                id: "c".into(),
                truth: None,
                predicted: ThreatClass::LocalAttack,
                m_anom: 0.5,
                h_norm: 0.3,
                c_local: 0.9,
                c_enh: 0.4,
                attack_score: 20.0,
                v_sem: None,
                suffix: vec![],
            },
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let rows = rows();
        let recs: Vec<_> = rows[..2].iter().map(|r| r.eval_record().unwrap()).collect();
        let report = evaluate(&recs).unwrap();
        let th = GateThresholds::default();
        let text = report_string(
            &rows,
            &Summary {
                thresholds: Some(&th),
                eval: Some(&report),
            },
        );
        assert!(text.contains("# f1_binary = 1\n"));
        assert!(text.contains("# confusion.clean = 1 0 0\n"));
        assert_eq!(parse_report(&text).unwrap(), rows);
    }

    #[test]
    fn missing_truth_blocks_evaluation() {
        assert!(rows()[2].eval_record().is_err());
        assert!(rows()[2].calibration_sample().is_err());
        assert!(!rows()[0].calibration_sample().unwrap().has_component);
    }

    #[test]
    fn rejects_malformed() {
        assert!(matches!(
            parse_report("a,b\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        let head = REPORT_HEADER.join(",");
        let bad = format!("{head}\nx,clean,clean,abc,0,0,0,0,,\n");
        assert!(matches!(
            parse_report(&bad),
            Err(Error::Parse { line: 2, .. })
        ));
        let bad = format!("{head}\nx,clean,nope,0,0,0,0,0,,\n");
        assert!(parse_report(&bad).is_err());
        let bad = format!("{head}\nx,clean,clean,NaN,0,0,0,0,,\n");
        assert!(parse_report(&bad).is_err());
        assert!(parse_report(&format!("{head}\nx,clean\n")).is_err());
        assert!(parse_report(&format!("{head}\n\"#x\",clean,clean,0,0,0,0,0,,\n")).is_err());
        assert!(parse_report(&format!("{head}\n\" x\",clean,clean,0,0,0,0,0,,\n")).is_err());
    }

    #[test]
    fn distributions_count_every_row_once_per_metric() {
        let mut buf = Vec::new();
        write_distributions(&mut buf, &rows()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut per_metric = std::collections::BTreeMap::<String, usize>::new();
        for r in rdr.records() {
            let r = r.unwrap();
            *per_metric.entry(r[0].to_string()).or_default() += r[4].parse::<usize>().unwrap();
        }
        assert_eq!(per_metric.len(), 4);
        assert!(per_metric.values().all(|&n| n == 3));
    }
}
