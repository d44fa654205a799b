//! Acceptance criteria 1-10. Each criterion prints one PASS/FAIL line; the
//! test fails if any criterion does. Run with `-- --nocapture` to see the
//! lines.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlmshield::embedspace::DualEncoder;
use vlmshield::errormap::{
    block_losses, reconstruct, BlockGrid, ErrorMap, LossSource, ReferenceReconstructor,
};
use vlmshield::harness::calibrate::ThresholdGrid;
use vlmshield::harness::eval::{roc_auc, BinaryCounts, EvalRecord};
use vlmshield::harness::fixtures::{eapt_fixtures, generate_suite, Fixture, SuiteSpec};
use vlmshield::harness::run::{detect_samples, RunSample};
use vlmshield::harness::{calibrate, evaluate};
use vlmshield::prompt_tuning::{augment, descend_fixed, eapt_gradient, eapt_loss, EaptConfig};
use vlmshield::purifier::build_mask;
use vlmshield::sentinel::{
    anomaly_magnitude, detection_metrics, dual_gate, energy_entropy, DetectionMetrics,
    SpatialMetrics,
};
use vlmshield::sentinel::{connected_components, BlockMask, Connectivity};
use vlmshield::{
    defend, EmbeddingVector, GateThresholds, Image, PipelineConfig, Projector, ThreatClass,
    ToyDualEncoder, Vocabulary,
};

const CALIBRATION_SEED: u64 = 0xCA11;
const EVALUATION_SEED: u64 = 0xE7A1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// Criterion 1.

fn cvar_oracle(losses: &[f64], alpha: f64) -> f64 {
    let mut s = losses.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((alpha * s.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let var = s[k - 1];
    let tail: Vec<f64> = s.iter().copied().filter(|&v| v >= var).collect();
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn cvar_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = rng.random_range(1..=500);
        let alpha = [0.9, 0.95, 0.99][i % 3];
        // Coarse values force ties in a third of the cases.
        let coarse = i % 3 == 0;
        let losses: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    rng.random_range(0..8) as f64 / 8.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let got = anomaly_magnitude(&losses, alpha).unwrap();
        worst = worst.max((got - cvar_oracle(&losses, alpha)).abs());
    }
    let singles_exact = (0..100).all(|_| {
        let v: f64 = rng.random::<f64>() * 10.0;
        [0.9, 0.95, 0.99]
            .iter()
            .all(|&a| anomaly_magnitude(&[v], a).unwrap() == v)
    });
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && singles_exact && secs < 5.0,
        format!("max |diff| {worst:e} (tol 1e-12), singletons exact: {singles_exact}, {secs:.2}s (limit 5s)"),
    )
}

// Criterion 2.

fn entropy_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for i in 0..1000 {
        let (rows, cols) = (rng.random_range(2..=20), rng.random_range(2..=20));
        let n = rows * cols;
        let values: Vec<f64> = match i % 4 {
            0 => (0..n).map(|_| rng.random::<f64>()).collect(),
            1 => (0..n)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        rng.random::<f64>()
                    } else {
                        0.0
                    }
                })
                .collect(),
            2 => (0..n).map(|_| rng.random::<f64>().powi(8) * 1e3).collect(),
            _ => (0..n).map(|_| rng.random::<f64>() * 1e-6).collect(),
        };
        let map = ErrorMap::new(rows, cols, values, LossSource::Computed).unwrap();
        let (h, _) = energy_entropy(&map);
        if !(h >= 0.0 && h <= (n as f64).ln()) {
            violations += 1;
        }
    }
    let mut uniform_worst = 0.0f64;
    let mut point_nonzero = 0;
    for _ in 0..200 {
        let (rows, cols) = (rng.random_range(2..=20), rng.random_range(2..=20));
        let n = rows * cols;
        let level = rng.random_range(1e-3..10.0);
        let uniform = ErrorMap::new(rows, cols, vec![level; n], LossSource::Computed).unwrap();
        uniform_worst = uniform_worst.max((energy_entropy(&uniform).1 - 1.0).abs());
        let mut v = vec![0.0; n];
        v[rng.random_range(0..n)] = level;
        let point = ErrorMap::new(rows, cols, v, LossSource::Computed).unwrap();
        if energy_entropy(&point).0 != 0.0 {
            point_nonzero += 1;
        }
    }
    outcome(
        violations == 0 && uniform_worst <= 1e-12 && point_nonzero == 0,
        format!(
            "bound violations {violations}/1000, uniform |h_norm-1| max {uniform_worst:e}, point-mass h != 0: {point_nonzero}/200"
        ),
    )
}

// Criterion 3.

fn flood_fill_oracle(
    bits: &[bool],
    rows: usize,
    cols: usize,
    eight: bool,
) -> BTreeSet<BTreeSet<(usize, usize)>> {
    let mut label = vec![usize::MAX; bits.len()];
    let mut out = BTreeSet::new();
    for start in 0..bits.len() {
        if !bits[start] || label[start] != usize::MAX {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut stack = vec![start];
        label[start] = start;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / cols, i % cols);
            comp.insert((r, c));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if (dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                        continue;
                    }
                    let j = rr as usize * cols + cc as usize;
                    if bits[j] && label[j] == usize::MAX {
                        label[j] = start;
                        stack.push(j);
                    }
                }
            }
        }
        out.insert(comp);
    }
    out
}

fn components_partition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for i in 0..500 {
        let density = [0.1, 0.3, 0.5, 0.7][i % 4];
        let bits: Vec<bool> = (0..196).map(|_| rng.random_bool(density)).collect();
        let mask = BlockMask::new(14, 14, bits.clone()).unwrap();
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let got: BTreeSet<BTreeSet<(usize, usize)>> = connected_components(&mask, conn)
                .into_iter()
                .map(|c| c.blocks.into_iter().collect())
                .collect();
            if got != flood_fill_oracle(&bits, 14, 14, eight) {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches over 500 masks x 2 connectivities"),
    )
}

// Criterion 4.

fn gate_truth_table() -> Outcome {
    use ThreatClass::*;
    let th = GateThresholds::default();
    let cases = [
        (0.1, 0.01, Clean),
        (0.3, 0.01, GlobalAttack),
        (0.3, 0.05, LocalAttack),
        (0.1, 0.05, LocalAttack),
        (0.3, 0.025, LocalAttack),
        (0.1, 0.025, Clean),
    ];
    let mut wrong = Vec::new();
    for (m, c, want) in cases {
        let metrics = DetectionMetrics::new(
            m,
            SpatialMetrics {
                h_energy: 1.0,
                h_norm: 0.5,
                c_local: c,
                c_enh: c,
                largest_component: vec![(0, 0)],
            },
        );
        let got = dual_gate(metrics, &th).class;
        if got != want {
            wrong.push(format!("({m}, {c}) -> {got}, want {want}"));
        }
    }
    outcome(
        wrong.is_empty(),
        format!("6 cases at t_s=0.2 t_cc1=0.03 t_cc2=0.02; wrong: {wrong:?}"),
    )
}

// Criterion 5.

fn random_unit_ish(rng: &mut ChaCha8Rng, d: usize) -> EmbeddingVector {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-2 {
            return EmbeddingVector::new(v).unwrap();
        }
    }
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let d = [4, 8, 64][i % 3];
        let lambda = [0.0, 0.1, 1.0][(i / 3) % 3];
        let e = random_unit_ish(&mut rng, d);
        let e0 = random_unit_ish(&mut rng, d);
        let aug: Vec<EmbeddingVector> = (0..rng.random_range(1..=6))
            .map(|_| random_unit_ish(&mut rng, d))
            .collect();
        let g = eapt_gradient(&e, &aug, &e0, lambda).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..d)
            .map(|j| {
                let mut plus = e.values().to_vec();
                let mut minus = plus.clone();
                plus[j] += h;
                minus[j] -= h;
                let lp =
                    eapt_loss(&EmbeddingVector::new(plus).unwrap(), &aug, &e0, lambda).unwrap();
                let lm =
                    eapt_loss(&EmbeddingVector::new(minus).unwrap(), &aug, &e0, lambda).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect();
        let diff = g
            .values()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = g
            .norm()
            .max(fd.iter().map(|x| x * x).sum::<f64>().sqrt())
            .max(1e-8);
        worst = worst.max(diff / scale);
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 10.0,
        format!("max relative error {worst:e} (tol 1e-4), {secs:.2}s (limit 10s)"),
    )
}

// Criterion 6.

fn descent_property() -> Outcome {
    let enc = ToyDualEncoder::default();
    let cfg = EaptConfig::default();
    let fixtures = eapt_fixtures(6).unwrap();
    let mut failures = 0;
    for (image, prompt) in &fixtures {
        let e0 = enc.encode_text(prompt).unwrap();
        let aug: Vec<EmbeddingVector> = (0..cfg.n_aug as u64)
            .map(|i| {
                enc.encode_image(&augment(image, cfg.seed, i).unwrap())
                    .unwrap()
            })
            .collect();
        let (e_opt, trace) = descend_fixed(&e0, &aug, &cfg).unwrap();
        let mut totals: Vec<f64> = trace.steps.iter().map(|s| s.total).collect();
        totals.push(eapt_loss(&e_opt, &aug, &e0, cfg.lambda).unwrap());
        if totals.windows(2).any(|w| w[1] > w[0]) {
            failures += 1;
        }
    }
    outcome(
        failures == 0 && fixtures.len() == 20,
        format!(
            "{failures}/{} fixtures with a loss increase (K=3, eta=5e-3, lambda=0.1)",
            fixtures.len()
        ),
    )
}

// Criteria 7 and 8 share the calibrated suite.

struct Suites {
    cfg: PipelineConfig,
    evaluation: Vec<Fixture>,
}

fn calibrated() -> Suites {
    let mut cfg = PipelineConfig::default();
    let cal: Vec<RunSample> = generate_suite(&SuiteSpec::calibration(CALIBRATION_SEED))
        .unwrap()
        .iter()
        .map(RunSample::from)
        .collect();
    let rows = detect_samples(&cal, &cfg).unwrap();
    let samples: Vec<_> = rows
        .iter()
        .map(|r| r.calibration_sample().unwrap())
        .collect();
    cfg.thresholds = calibrate(&samples, &ThresholdGrid::default(), &cfg.thresholds)
        .unwrap()
        .thresholds;
    Suites {
        cfg,
        evaluation: generate_suite(&SuiteSpec::evaluation(EVALUATION_SEED)).unwrap(),
    }
}

fn purification_locality(s: &Suites) -> Outcome {
    let enc = ToyDualEncoder::default();
    let vocab = Vocabulary::synthetic(64, 64, 1).unwrap();
    let proj = Projector::identity(64).unwrap();
    let patches: Vec<&Fixture> = s
        .evaluation
        .iter()
        .filter(|f| f.truth == ThreatClass::LocalAttack)
        .collect();
    let (mut leaks, mut good_iou) = (0, 0);
    for f in &patches {
        let out = defend(
            std::slice::from_ref(&f.image),
            "",
            &s.cfg,
            &enc,
            &vocab,
            &proj,
        )
        .unwrap();
        if let (Some(purified), Some(mask)) = (out.purified_image(), &out.mask) {
            for y in 0..f.image.height() {
                for x in 0..f.image.width() {
                    let changed = (0..3).any(|c| purified.get(y, x, c) != f.image.get(y, x, c));
                    if changed && !mask.get(y, x) {
                        leaks += 1;
                    }
                }
            }
        }
        let component = &out.verdict.metrics.largest_component;
        if !component.is_empty() {
            let detected =
                build_mask(component, &out.grid, 0, f.image.height(), f.image.width()).unwrap();
            if detected.iou(f.ground_truth_mask.as_ref().unwrap()).unwrap() >= 0.9 {
                good_iou += 1;
            }
        }
    }
    let frac = good_iou as f64 / patches.len() as f64;
    outcome(
        leaks == 0 && frac >= 0.9,
        format!(
            "pixels changed outside mask: {leaks}; IoU >= 0.9 on {good_iou}/{} ({:.1}%, need 90%)",
            patches.len(),
            100.0 * frac
        ),
    )
}

fn triage_quality(s: &Suites) -> Outcome {
    let samples: Vec<RunSample> = s.evaluation.iter().map(RunSample::from).collect();
    let rows = detect_samples(&samples, &s.cfg).unwrap();
    let recs: Vec<EvalRecord> = rows.iter().map(|r| r.eval_record().unwrap()).collect();
    let r = evaluate(&recs).unwrap();
    let th = &s.cfg.thresholds;
    outcome(
        r.f1_binary >= 0.90 && r.three_way_accuracy >= 0.85,
        format!(
            "n={} F1 {:.4} (need 0.90), three-way {:.4} (need 0.85); calibrated t_s={:.3e} t_cc1={:.3e} t_cc2={:.3e}",
            r.n, r.f1_binary, r.three_way_accuracy, th.t_s, th.t_cc1, th.t_cc2
        ),
    )
}

// Criterion 9.

fn auc_all_pairs(scored: &[(f64, bool)]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for p in scored.iter().filter(|s| s.1) {
        for n in scored.iter().filter(|s| !s.1) {
            pairs += 1.0;
            wins += if p.0 > n.0 {
                1.0
            } else if p.0 == n.0 {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for i in 0..500 {
        let n = rng.random_range(2..200);
        let mut scored: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let s = if i % 2 == 0 {
                    rng.random_range(0..10) as f64
                } else {
                    rng.random::<f64>()
                };
                (s, rng.random_bool(0.4))
            })
            .collect();
        scored[0].1 = true;
        scored[1].1 = false;
        worst = worst.max((roc_auc(&scored).unwrap() - auc_all_pairs(&scored)).abs());
    }
    let counts = BinaryCounts {
        tp: 7,
        fp: 3,
        fn_: 1,
        tn: 9,
    };
    let f1 = counts.f1();
    outcome(
        worst <= 1e-12 && (f1 - 0.7778).abs() <= 1e-4 && (f1 - 14.0 / 18.0).abs() <= 1e-6,
        format!("max |auc - all-pairs| {worst:e} (tol 1e-12); worked example F1 {f1:.6} (expect 0.777778)"),
    )
}

// Criterion 10.

fn run_cli(bin: &str, args: &[&str]) -> std::process::Output {
    Command::new(bin).args(args).output().expect("spawn CLI")
}

fn determinism_and_throughput() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_vlmshield");
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fixtures");
    let fx_s = fx.to_str().unwrap();
    let gen = run_cli(
        bin,
        &[
            "gen-fixtures",
            "--out",
            fx_s,
            "--seed",
            "10",
            "--clean",
            "4",
            "--global",
            "4",
            "--patch",
            "4",
        ],
    );
    assert!(
        gen.status.success(),
        "{}",
        String::from_utf8_lossy(&gen.stderr)
    );
    let manifest = fx.join("manifest.tsv");
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "2", "4"].iter().enumerate() {
        let p = |name: &str| {
            dir.path()
                .join(format!("{name}-{i}"))
                .to_str()
                .unwrap()
                .to_string()
        };
        let (report, records, dist) = (p("report.csv"), p("records.jsonl"), p("dist.csv"));
        let out = run_cli(
            bin,
            &[
                "run",
                "--manifest",
                manifest.to_str().unwrap(),
                "--report",
                &report,
                "--records",
                &records,
                "--distributions",
                &dist,
                "--threads",
                threads,
                "--set",
                "t_s=1e-5",
            ],
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let read = |s: &str| std::fs::read(Path::new(s)).unwrap();
        outputs.push((read(&report), read(&records), read(&dist)));
    }
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);

    let image = generate_suite(&SuiteSpec {
        clean: 1,
        global: 0,
        patch: 0,
        ..SuiteSpec::evaluation(3)
    })
    .unwrap()[0]
        .image
        .clone();
    let grid = BlockGrid::fit(224, 224, 14, 14).unwrap();
    let th = GateThresholds::default();
    let detect = |img: &Image| {
        let recon = reconstruct(img, &ReferenceReconstructor::LOWPASS).unwrap();
        let map = block_losses(img, &recon, &grid).unwrap();
        dual_gate(
            detection_metrics(&map, &th, Connectivity::Eight).unwrap(),
            &th,
        )
    };
    for _ in 0..5 {
        detect(&image);
    }
    let frames = 100;
    let t = Instant::now();
    for _ in 0..frames {
        std::hint::black_box(detect(std::hint::black_box(&image)));
    }
    let fps = frames as f64 / t.elapsed().as_secs_f64();
    outcome(
        identical && fps >= 50.0,
        format!("3 runs (1/2/4 threads) byte-identical: {identical}; detection {fps:.0} frames/s single-threaded (need 50)"),
    )
}

#[test]
fn acceptance_criteria() {
    let suites = calibrated();
    let results: Vec<(&str, Outcome)> = vec![
        ("oracle equivalence", cvar_equivalence()),
        ("entropy bounds", entropy_bounds()),
        ("connected components", components_partition()),
        ("gate truth table", gate_truth_table()),
        ("gradient correctness", gradient_check()),
        ("descent property", descent_property()),
        ("purification locality", purification_locality(&suites)),
        ("synthetic triage quality", triage_quality(&suites)),
        ("auc oracle", auc_oracle()),
        ("determinism and throughput", determinism_and_throughput()),
    ];
    for (i, (name, o)) in results.iter().enumerate() {
        println!(
            "criterion {:>2} {}: {} ({})",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            name,
            o.detail
        );
    }
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.1.pass)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
