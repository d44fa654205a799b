//! `vlmshield`: detect, purify and harden inputs to a vision-language model.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vlmshield::embedspace::{semantic_verification, TOY_DIM};
use vlmshield::errormap::import_error_map;
use vlmshield::harness::calibrate::ThresholdGrid;
use vlmshield::harness::fixtures::{generate_suite, SuiteSpec};
use vlmshield::harness::manifest::{manifest_text, ManifestEntry};
use vlmshield::harness::report::{report_string, write_distributions, ReportRow, Summary};
use vlmshield::harness::run::{detect_frames, load_samples, run_samples, RunSample};
use vlmshield::harness::{calibrate, evaluate, load_manifest, parse_report};
use vlmshield::pipeline::{defend, pooled_metrics};
use vlmshield::prompt_tuning::{compose_prompt, generate_suffix, optimize_suffix_embedding};
use vlmshield::purifier::{apply_gray_mask, build_mask};
use vlmshield::sentinel::{dual_gate, ThreatClass, Verdict};
use vlmshield::{config, Image, PipelineConfig, Projector, ToyDualEncoder, Vocabulary};

const DEFAULT_PROMPT: &str = "Describe the road ahead and the safest next action.";
const DEFAULT_VOCAB_SIZE: usize = 1000;

#[derive(Parser)]
#[command(
    name = "vlmshield",
    version,
    about = "Adversarial-input triage and defense for VLM pipelines"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labelled synthetic suite (PNGs, patch masks, manifest).
    GenFixtures(GenFixturesArgs),
    /// Score frames and print the gate verdict as JSON.
    Detect(DetectArgs),
    /// Gray out the detected patch region of an image.
    Purify(PurifyArgs),
    /// Tune a prompt suffix against augmented views of an image.
    Eapt(EaptArgs),
    /// Run the full defense over a manifest and write a report.
    Run(RunArgs),
    /// Recompute detection metrics from a report.
    Evaluate(EvaluateArgs),
    /// Grid-search gate thresholds on a labelled report.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    /// Vocabulary file (`token<TAB>v1,v2,...` per line); synthetic if omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Projector file; identity if omitted.
    #[arg(long)]
    projector: Option<PathBuf>,
    /// Seed of the toy dual encoder and synthetic vocabulary.
    #[arg(long, default_value_t = 0x5eed)]
    model_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteKind {
    Evaluation,
    Calibration,
}

#[derive(Args)]
struct GenFixturesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "evaluation")]
    suite: SuiteKind,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    clean: Option<usize>,
    #[arg(long)]
    global: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    /// Image side in pixels.
    #[arg(long)]
    side: Option<usize>,
}

#[derive(Args)]
struct DetectArgs {
    /// Frames of one clip, in temporal order.
    #[arg(required = true)]
    frames: Vec<PathBuf>,
    /// Precomputed block-loss maps, one per frame, instead of reconstructing.
    #[arg(long = "error-map")]
    error_maps: Vec<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct PurifyArgs {
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Mask the largest component even when the gate does not call a local attack.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EaptArgs {
    image: PathBuf,
    #[arg(long, default_value = DEFAULT_PROMPT)]
    prompt: String,
    /// Write the per-step loss trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Per-sample CSV report with a summary block.
    #[arg(long)]
    report: PathBuf,
    /// One JSON outcome record per sample.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Per-class metric histograms.
    #[arg(long)]
    distributions: Option<PathBuf>,
    /// Directory for purified images of local attacks.
    #[arg(long)]
    purified_dir: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_PROMPT)]
    prompt: String,
    /// Include wall-clock timings in the JSON records (not reproducible).
    #[arg(long)]
    timings: bool,
    /// Worker threads; output does not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    report: PathBuf,
    #[arg(long)]
    distributions: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Labelled report; only `m_anom`, `c_local` and `c_enh` are used.
    report: PathBuf,
    /// Grid points per decade.
    #[arg(long, default_value_t = 10)]
    per_decade: usize,
    #[arg(long, value_name = "LO:HI", default_value = "1e-6:1")]
    t_s_range: String,
    #[arg(long, value_name = "LO:HI", default_value = "1e-3:1")]
    t_cc_range: String,
    /// Write the full config with calibrated thresholds.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<vlmshield::Error> for Failure {
    fn from(e: vlmshield::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.cmd {
        Command::GenFixtures(a) => gen_fixtures(a),
        Command::Detect(a) => detect(a),
        Command::Purify(a) => purify(a),
        Command::Eapt(a) => eapt(a),
        Command::Run(a) => run(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(args: &ConfigArgs) -> CliResult<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)
            .map_err(|e| Failure::Usage(format!("--set {kv}: {e}")))?;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_models(args: &ModelArgs) -> CliResult<(ToyDualEncoder, Vocabulary, Projector)> {
    let enc = ToyDualEncoder::new(args.model_seed, TOY_DIM)?;
    let vocab = match &args.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::synthetic(DEFAULT_VOCAB_SIZE, TOY_DIM, args.model_seed)?,
    };
    let proj = match &args.projector {
        Some(p) => Projector::load(p)?,
        None => Projector::identity(TOY_DIM)?,
    };
    Ok((enc, vocab, proj))
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn gen_fixtures(a: GenFixturesArgs) -> CliResult {
    let mut spec = match a.suite {
        SuiteKind::Evaluation => SuiteSpec::evaluation(a.seed),
        SuiteKind::Calibration => SuiteSpec::calibration(a.seed),
    };
    spec.clean = a.clean.unwrap_or(spec.clean);
    spec.global = a.global.unwrap_or(spec.global);
    spec.patch = a.patch.unwrap_or(spec.patch);
    spec.side = a.side.unwrap_or(spec.side);
    if spec.side < 64 {
        return Err(Failure::Usage("--side must be at least 64".into()));
    }
    let suite = generate_suite(&spec)?;
    fs::create_dir_all(a.out.join("images"))?;
    fs::create_dir_all(a.out.join("masks"))?;
    let mut entries = Vec::with_capacity(suite.len());
    for f in &suite {
        let rel = PathBuf::from("images").join(format!("{}.png", f.id));
        f.image.save_png(a.out.join(&rel))?;
        if let Some(m) = &f.ground_truth_mask {
            m.save_png(a.out.join("masks").join(format!("{}.png", f.id)))?;
        }
        entries.push(ManifestEntry {
            id: f.id.clone(),
            path: rel,
            truth: Some(f.truth),
        });
    }
    fs::write(a.out.join("manifest.tsv"), manifest_text(&entries))?;
    println!("wrote {} samples to {}", suite.len(), a.out.display());
    Ok(())
}

fn load_frames(paths: &[PathBuf]) -> CliResult<Vec<Image>> {
    Ok(paths.iter().map(Image::load).collect::<Result<_, _>>()?)
}

fn detect(a: DetectArgs) -> CliResult {
    let cfg = load_config(&a.cfg)?;
    let frames = load_frames(&a.frames)?;
    let verdict = if a.error_maps.is_empty() {
        detect_frames(&frames, &cfg)?
    } else {
        if a.error_maps.len() != frames.len() {
            return Err(Failure::Usage("give one --error-map per frame".into()));
        }
        let grid = cfg.grid_for(&frames[0])?;
        let maps = a
            .error_maps
            .iter()
            .map(|p| import_error_map(p, grid.rows, grid.cols))
            .collect::<Result<Vec<_>, _>>()?;
        let (metrics, _) = pooled_metrics(&maps, &cfg)?;
        dual_gate(metrics, &cfg.thresholds)
    };
    println!("{}", json(&verdict));
    Ok(())
}

fn purify(a: PurifyArgs) -> CliResult {
    let cfg = load_config(&a.cfg)?;
    let image = Image::load(&a.image)?;
    let verdict: Verdict = detect_frames(std::slice::from_ref(&image), &cfg)?;
    let component = &verdict.metrics.largest_component;
    let apply = (verdict.class == ThreatClass::LocalAttack || a.force) && !component.is_empty();
    let out = if apply {
        let mask = build_mask(
            component,
            &cfg.grid_for(&image)?,
            cfg.dilation,
            image.height(),
            image.width(),
        )?;
        if let Some(p) = &a.mask_out {
            mask.save_png(p)?;
        }
        apply_gray_mask(&image, &mask, cfg.gray)?
    } else {
        image
    };
    out.save_png(&a.out)?;
    println!(
        "{{\"verdict\":\"{}\",\"purified\":{},\"blocks\":{}}}",
        verdict.class,
        apply,
        if apply { component.len() } else { 0 }
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct EaptOutput<'a> {
    v_sem: f64,
    suffix: &'a [String],
    prompt: &'a str,
    initial_loss: f64,
    final_loss: f64,
}

fn eapt(a: EaptArgs) -> CliResult {
    let cfg = load_config(&a.cfg)?;
    let (enc, vocab, proj) = load_models(&a.model)?;
    let image = Image::load(&a.image)?;
    let v_sem = semantic_verification(&image, &a.prompt, &enc)?;
    let (e_opt, trace) = optimize_suffix_embedding(&image, &a.prompt, &enc, &cfg.eapt)?;
    let suffix = generate_suffix(&e_opt, &proj, &vocab, cfg.eapt.k_suffix)?;
    let robust = compose_prompt(&a.prompt, &suffix);
    if let Some(p) = &a.trace {
        fs::write(p, trace.to_csv())?;
    }
    let loss = |i: usize| trace.steps.get(i).map_or(0.0, |s| s.total);
    println!(
        "{}",
        json(&EaptOutput {
            v_sem,
            suffix: &robust.suffix,
            prompt: &robust.composed,
            initial_loss: loss(0),
            final_loss: loss(trace.steps.len().saturating_sub(1)),
        })
    );
    Ok(())
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Failure::Usage("--threads must be positive".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::Data(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn run(a: RunArgs) -> CliResult {
    let cfg = load_config(&a.cfg)?;
    let (enc, vocab, proj) = load_models(&a.model)?;
    let entries = load_manifest(&a.manifest)?;
    if entries.is_empty() {
        return Err(Failure::Data("manifest lists no samples".into()));
    }
    let samples = with_threads(a.threads, || load_samples(&entries))??;
    let rows = with_threads(a.threads, || {
        run_samples(&samples, &a.prompt, &cfg, &enc, &vocab, &proj)
    })??;
    write_report_file(&a.report, &rows, &cfg)?;
    if let Some(p) = &a.distributions {
        write_distributions(fs::File::create(p)?, &rows)?;
    }
    if a.records.is_some() || a.purified_dir.is_some() {
        side_outputs(&a, &samples, &cfg, &enc, &vocab, &proj)?;
    }
    let attacks = rows.iter().filter(|r| r.predicted.is_attack()).count();
    println!(
        "{} samples, {} flagged; report at {}",
        rows.len(),
        attacks,
        a.report.display()
    );
    Ok(())
}

/// Records and purified images need the full outcome, so they rerun the
/// (deterministic) defense; results are written in manifest order.
fn side_outputs(
    a: &RunArgs,
    samples: &[RunSample],
    cfg: &PipelineConfig,
    enc: &ToyDualEncoder,
    vocab: &Vocabulary,
    proj: &Projector,
) -> CliResult {
    use rayon::prelude::*;
    let want_images = a.purified_dir.is_some();
    let produced = with_threads(a.threads, || {
        samples
            .par_iter()
            .map(|s| {
                let out = defend(&s.frames, &a.prompt, cfg, enc, vocab, proj)?;
                let png = match out.purified_image() {
                    Some(img) if want_images => Some(img.encode_png()?),
                    _ => None,
                };
                Ok((out.record(&s.id, a.timings).to_json_line(), png))
            })
            .collect::<vlmshield::Result<Vec<_>>>()
    })??;
    if let Some(p) = &a.records {
        let mut w = io::BufWriter::new(fs::File::create(p)?);
        for (line, _) in &produced {
            writeln!(w, "{line}")?;
        }
        w.flush()?;
    }
    if let Some(d) = &a.purified_dir {
        fs::create_dir_all(d)?;
        for (s, (_, png)) in samples.iter().zip(&produced) {
            if let Some(bytes) = png {
                fs::write(d.join(format!("{}.png", s.id)), bytes)?;
            }
        }
    }
    Ok(())
}

fn write_report_file(path: &Path, rows: &[ReportRow], cfg: &PipelineConfig) -> CliResult {
    let labelled = rows.iter().all(|r| r.truth.is_some());
    let eval = if labelled {
        let recs = rows
            .iter()
            .map(ReportRow::eval_record)
            .collect::<Result<Vec<_>, _>>()?;
        Some(evaluate(&recs)?)
    } else {
        None
    };
    let text = report_string(
        rows,
        &Summary {
            thresholds: Some(&cfg.thresholds),
            eval: eval.as_ref(),
        },
    );
    fs::write(path, text)?;
    Ok(())
}

fn read_report(path: &Path) -> CliResult<Vec<ReportRow>> {
    let rows = parse_report(&fs::read_to_string(path)?)?;
    if rows.is_empty() {
        return Err(Failure::Data(format!("{} has no rows", path.display())));
    }
    Ok(rows)
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult {
    let rows = read_report(&a.report)?;
    let recs = rows
        .iter()
        .map(ReportRow::eval_record)
        .collect::<Result<Vec<_>, _>>()?;
    let report = evaluate(&recs)?;
    let text = report_string(
        &[],
        &Summary {
            thresholds: None,
            eval: Some(&report),
        },
    );
    // Drop the empty table header; keep the summary block.
    for line in text.lines().filter(|l| l.starts_with('#')) {
        println!("{}", &line[2..]);
    }
    if let Some(p) = &a.distributions {
        write_distributions(fs::File::create(p)?, &rows)?;
    }
    Ok(())
}

fn parse_range(s: &str) -> CliResult<(f64, f64)> {
    let bad = || Failure::Usage(format!("expected LO:HI, got {s:?}"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    Ok((
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
    ))
}

fn calibrate_cmd(a: CalibrateArgs) -> CliResult {
    let mut cfg = load_config(&a.cfg)?;
    let grid = ThresholdGrid::log_spaced(
        parse_range(&a.t_s_range)?,
        parse_range(&a.t_cc_range)?,
        a.per_decade,
    )
    .map_err(|e| Failure::Usage(e.to_string()))?;
    let rows = read_report(&a.report)?;
    let samples = rows
        .iter()
        .map(ReportRow::calibration_sample)
        .collect::<Result<Vec<_>, _>>()?;
    let c = calibrate(&samples, &grid, &cfg.thresholds)?;
    cfg.thresholds = c.thresholds;
    println!("t_s = {}", c.thresholds.t_s);
    println!("t_cc1 = {}", c.thresholds.t_cc1);
    println!("t_cc2 = {}", c.thresholds.t_cc2);
    println!("f1_binary = {}", c.f1_binary);
    println!("three_way_accuracy = {}", c.three_way_accuracy);
    println!("candidates = {}", c.candidates);
    if let Some(p) = &a.out {
        fs::write(p, config::to_text(&cfg))?;
    }
    Ok(())
}
